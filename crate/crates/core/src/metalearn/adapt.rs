use crate::error::Result;
use crate::harness::MetricsReport;
use crate::numerics::{sgd_step, ParamSet};
use crate::policy::SampleMode;
use crate::simulator::{Episode, EpisodeKind, Session};

use super::episode::{run_episode, Learn};
use super::{Env, MetaParams, EVAL_ROUND};

/// A user's personalized parameters after the exploration and support stages.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub policy: ParamSet,
    pub rec: ParamSet,
    /// Hidden state handed from exploration to the first support episode.
    pub h_e: Vec<f64>,
    /// Hidden state handed from the last support episode to the query set.
    pub h_r: Vec<f64>,
    pub exploration: Vec<Episode>,
    pub support: Vec<Episode>,
    /// Summed `L_e` gradients w.r.t. `θ_e` and `θ_T`, when requested.
    pub explore_grads: Option<(ParamSet, ParamSet)>,
    pub explore_learned: usize,
}

fn accumulate(acc: &mut Option<ParamSet>, g: Option<ParamSet>) -> Result<()> {
    if let Some(g) = g {
        match acc {
            Some(a) => a.add_scaled(&g, 1.0)?,
            None => *acc = Some(g),
        }
    }
    Ok(())
}

/// Exploration episodes under `θ_e`, then support episodes under `θ_u`
/// (initialized to `θ`) with one SGD step on `L_u` and on `L_r` after each.
pub fn local_adapt(
    env: &Env<'_>,
    params: &MetaParams,
    sessions: &[Session],
    learn_explore: bool,
    round: u64,
) -> Result<Adapted> {
    let mut h = vec![0.0; env.hidden()];
    let mut exploration = Vec::new();
    let (mut ge, mut gt) = (None, None);
    let mut explore_learned = 0;
    for s in sessions.iter().filter(|s| s.kind == EpisodeKind::Exploration) {
        let learn = if learn_explore { Learn::Explore } else { Learn::None };
        let out = run_episode(env, &params.explore, &params.rec, &params.enc, s, &h, SampleMode::Sample, learn, round)?;
        if out.loss.is_some() {
            explore_learned += 1;
        }
        accumulate(&mut ge, out.policy_grad)?;
        accumulate(&mut gt, out.enc_grad)?;
        h = out.h_final;
        exploration.push(out.episode);
    }
    let h_e = h.clone();
    let mut policy = params.policy.clone();
    let mut rec = params.rec.clone();
    let alpha = env.cfg.alpha;
    let mut support = Vec::new();
    for s in sessions.iter().filter(|s| s.kind == EpisodeKind::Support) {
        let learn = if alpha > 0.0 { Learn::Adapt } else { Learn::None };
        let out = run_episode(env, &policy, &rec, &params.enc, s, &h, SampleMode::Sample, learn, round)?;
        if let Some(g) = &out.policy_grad {
            sgd_step(&mut policy, g, alpha)?;
        }
        if let Some(g) = &out.rec_grad {
            sgd_step(&mut rec, g, alpha)?;
        }
        h = out.h_final;
        support.push(out.episode);
    }
    let explore_grads = match (ge, gt) {
        (Some(e), Some(t)) => Some((e, t)),
        _ => None,
    };
    Ok(Adapted {
        policy,
        rec,
        h_e,
        h_r: h,
        exploration,
        support,
        explore_grads,
        explore_learned,
    })
}

/// Gradients summed over the query set w.r.t. the adapted policy, the
/// adapted recommender and the encoder.
#[derive(Debug, Default)]
pub struct QueryGrads {
    pub policy: Option<ParamSet>,
    pub rec: Option<ParamSet>,
    pub enc: Option<ParamSet>,
    pub count: usize,
}

/// Query episodes with fixed parameters, carrying the hidden state along.
#[allow(clippy::too_many_arguments)]
pub fn query_episodes(
    env: &Env<'_>,
    policy: &ParamSet,
    rec: &ParamSet,
    enc: &ParamSet,
    sessions: &[Session],
    h0: &[f64],
    mode: SampleMode,
    learn: bool,
    round: u64,
) -> Result<(Vec<Episode>, QueryGrads)> {
    let mut h = h0.to_vec();
    let mut episodes = Vec::new();
    let mut grads = QueryGrads::default();
    for s in sessions.iter().filter(|s| s.kind == EpisodeKind::Query) {
        let l = if learn { Learn::Query } else { Learn::None };
        let out = run_episode(env, policy, rec, enc, s, &h, mode, l, round)?;
        if out.loss.is_some() {
            grads.count += 1;
        }
        accumulate(&mut grads.policy, out.policy_grad)?;
        accumulate(&mut grads.rec, out.rec_grad)?;
        accumulate(&mut grads.enc, out.enc_grad)?;
        h = out.h_final;
        episodes.push(out.episode);
    }
    Ok((episodes, grads))
}

/// Query-set results over a group of users.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub query: Vec<Episode>,
    /// Exploration and support episodes, in order.
    pub adaptation: Vec<Episode>,
}

impl EvalReport {
    pub fn new(query: Vec<Episode>, adaptation: Vec<Episode>, max_turns: usize) -> Result<Self> {
        Ok(Self {
            metrics: MetricsReport::from_episodes(&query, max_turns)?,
            query,
            adaptation,
        })
    }
}

/// Adapts to each user with `θ_e` and `θ_T` frozen, then evaluates the
/// adapted policy greedily on the user's query set.
pub fn meta_test(env: &Env<'_>, params: &MetaParams, users: &[usize], eval_seed: u64) -> Result<EvalReport> {
    let round = EVAL_ROUND + eval_seed;
    let mut query = Vec::new();
    let mut adaptation = Vec::new();
    for &u in users {
        let sessions = env.sessions(u, env.cfg.budget, round)?;
        let a = local_adapt(env, params, &sessions, false, round)?;
        let (q, _) = query_episodes(
            env,
            &a.policy,
            &a.rec,
            &params.enc,
            &sessions,
            &a.h_r,
            SampleMode::Greedy,
            false,
            round,
        )?;
        adaptation.extend(a.exploration);
        adaptation.extend(a.support);
        query.extend(q);
    }
    EvalReport::new(query, adaptation, env.cfg.rollout.max_turns)
}
