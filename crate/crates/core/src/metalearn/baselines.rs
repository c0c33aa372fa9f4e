use serde::{Deserialize, Serialize};

use crate::catalog::Role;
use crate::dialogue::{attribute_entropy, rank_items, Action, DialogueState};
use crate::error::Result;
use crate::numerics::sgd_step;
use crate::policy::{Responder, SampleMode, SimResponder};
use crate::simulator::{Budget, Episode, EpisodeKind, Session};
use crate::dialogue::{Outcome, TurnRecord};

use super::adapt::{local_adapt, query_episodes, EvalReport};
use super::episode::{run_episode, Learn};
use super::train::{run_training, sample_batch, EpochStats, MetaOptim, TrainOptions, TrainRun, ValidationPoint};
use super::{Env, MetaParams, EVAL_ROUND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxEConfig {
    /// Ask while more than this many candidates remain.
    pub threshold: usize,
}

impl Default for MaxEConfig {
    fn default() -> Self {
        Self { threshold: 10 }
    }
}

/// Rule-based agent: ask the maximum-entropy attribute while many candidates
/// remain, otherwise recommend the best candidates under `ū·e_v`.
pub(crate) fn maxe_episode(env: &Env<'_>, mcfg: &MaxEConfig, user_vec: &[f64], session: &Session) -> Result<Episode> {
    let cat = &env.ds.catalog;
    let opts = &env.cfg.rollout;
    let items = &env.ds.embeddings.items;
    let mut state = DialogueState::new(cat.n_items(), opts.max_turns)?;
    let mut responder = SimResponder {
        session,
        catalog: cat,
        rewards: &env.cfg.rewards,
    };
    let mut turns = Vec::new();
    while !state.is_terminal() {
        let entropy = attribute_entropy(&state, cat);
        let best_attr = (0..cat.n_attrs())
            .filter(|&p| !state.attr_asked(p))
            .fold(None, |best: Option<usize>, p| match best {
                Some(b) if entropy[b] >= entropy[p] => Some(b),
                _ => Some(p),
            })
            .filter(|&p| entropy[p] > 0.0);
        let last_turn = state.turn() + 1 >= state.max_turns();
        let action = match best_attr {
            Some(p) if state.candidates().len() > mcfg.threshold && !last_turn => Action::Ask { attr: p },
            _ => {
                let pool: Vec<usize> = state
                    .candidates()
                    .iter()
                    .copied()
                    .filter(|v| !state.rejected_items().contains(v))
                    .collect();
                let pool = if pool.is_empty() { state.candidates().to_vec() } else { pool };
                let scores: Vec<f64> = pool
                    .iter()
                    .map(|&v| items.row(v).iter().zip(user_vec).map(|(a, b)| a * b).sum())
                    .collect();
                let mut ranked = rank_items(&pool, &scores);
                ranked.truncate(opts.k_rec);
                Action::Recommend { items: ranked }
            }
        };
        let (feedback, reward) = responder.respond(&state, &action)?;
        turns.push(TurnRecord {
            turn: state.turn(),
            action: action.clone(),
            feedback,
            reward,
            candidates: state.candidates().len(),
        });
        state = state.apply_feedback(cat, &action, feedback)?;
    }
    Ok(Episode {
        user: session.user,
        kind: session.kind,
        target: session.target,
        turns,
        outcome: match state.outcome() {
            Outcome::Ongoing => Outcome::Quit,
            o => o,
        },
    })
}

/// Mean embedding over the training users.
pub(crate) fn mean_train_user(env: &Env<'_>) -> Vec<f64> {
    let dim = env.dim();
    let mut mean = vec![0.0; dim];
    for &u in env.train_users() {
        for (m, x) in mean.iter_mut().zip(env.ds.embeddings.users.row(u)) {
            *m += x;
        }
    }
    let n = env.train_users().len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// MaxE on each user's query sessions; no learning involved.
pub fn baseline_maxe(env: &Env<'_>, users: &[usize], mcfg: &MaxEConfig, eval_seed: u64) -> Result<EvalReport> {
    let round = EVAL_ROUND + eval_seed;
    let u_bar = mean_train_user(env);
    let mut query = Vec::new();
    for &u in users {
        for s in env.sessions(u, env.cfg.budget, round)? {
            if s.kind == EpisodeKind::Query {
                query.push(maxe_episode(env, mcfg, &u_bar, &s)?);
            }
        }
    }
    EvalReport::new(query, Vec::new(), env.cfg.rollout.max_turns)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// The global policy as trained, no updates on new users.
    Global,
    /// One shared copy updated on every new user's episodes.
    Ft,
    /// An independent copy per new user.
    Ia,
}

fn finetune_budget(env: &Env<'_>) -> Budget {
    Budget {
        exploration: 0,
        support: env.cfg.finetune_episodes,
        query: env.cfg.budget.query,
    }
}

/// Evaluates a globally trained policy after `finetune_episodes` adaptation
/// episodes per new user.
pub fn baseline_finetune(
    env: &Env<'_>,
    global: &MetaParams,
    users: &[usize],
    mode: FinetuneMode,
    eval_seed: u64,
) -> Result<EvalReport> {
    let round = EVAL_ROUND + eval_seed;
    let budget = finetune_budget(env);
    let max_turns = env.cfg.rollout.max_turns;
    let mut query = Vec::new();
    let mut adaptation = Vec::new();
    match mode {
        FinetuneMode::Global | FinetuneMode::Ia => {
            let mut cfg = env.cfg.clone();
            if mode == FinetuneMode::Global {
                cfg.alpha = 0.0;
            }
            let env = env.with_config(cfg)?;
            for &u in users {
                let sessions = env.sessions(u, budget, round)?;
                let a = local_adapt(&env, global, &sessions, false, round)?;
                let (q, _) = query_episodes(
                    &env,
                    &a.policy,
                    &a.rec,
                    &global.enc,
                    &sessions,
                    &a.h_r,
                    SampleMode::Greedy,
                    false,
                    round,
                )?;
                adaptation.extend(a.support);
                query.extend(q);
            }
        }
        FinetuneMode::Ft => {
            let mut policy = global.policy.clone();
            let mut rec = global.rec.clone();
            let alpha = env.cfg.alpha;
            let mut handoff = Vec::with_capacity(users.len());
            for &u in users {
                let sessions = env.sessions(u, budget, round)?;
                let mut h = vec![0.0; env.hidden()];
                for s in sessions.iter().filter(|s| s.kind == EpisodeKind::Support) {
                    let learn = if alpha > 0.0 { Learn::Adapt } else { Learn::None };
                    let out = run_episode(env, &policy, &rec, &global.enc, s, &h, SampleMode::Sample, learn, round)?;
                    if let Some(g) = &out.policy_grad {
                        sgd_step(&mut policy, g, alpha)?;
                    }
                    if let Some(g) = &out.rec_grad {
                        sgd_step(&mut rec, g, alpha)?;
                    }
                    h = out.h_final;
                    adaptation.push(out.episode);
                }
                handoff.push((sessions, h));
            }
            for (sessions, h) in &handoff {
                let (q, _) = query_episodes(
                    env,
                    &policy,
                    &rec,
                    &global.enc,
                    sessions,
                    h,
                    SampleMode::Greedy,
                    false,
                    round,
                )?;
                query.extend(q);
            }
        }
    }
    EvalReport::new(query, adaptation, max_turns)
}

/// Trains `θ`, `θ_R` and `θ_T` jointly on training users' episodes with no
/// inner/outer split. Validation uses the untouched global policy.
pub fn train_global(env: &Env<'_>, init: MetaParams, opts: TrainOptions<'_>) -> Result<TrainRun> {
    let valid = env.ds.users(Role::Validation);
    let validate = |p: &MetaParams| -> Result<ValidationPoint> {
        let m = baseline_finetune(env, p, &valid, FinetuneMode::Global, 0)?.metrics;
        Ok(ValidationPoint {
            epoch: 0,
            sr_at: m.sr_at,
            at: m.at,
        })
    };
    let mut optim = MetaOptim::new(env, &init);
    let budget = Budget {
        exploration: 0,
        support: 0,
        query: env.cfg.budget.total(),
    };
    run_training(env, init, opts, &validate, |p, epoch| {
        let users = sample_batch(env, epoch);
        let mut g_policy = p.policy.zeros_like();
        let mut g_rec = p.rec.zeros_like();
        let mut g_enc = p.enc.zeros_like();
        let mut eps = Vec::new();
        for &u in &users {
            let sessions = env.sessions(u, budget, epoch as u64)?;
            let h0 = vec![0.0; env.hidden()];
            let (q, grads) = query_episodes(
                env,
                &p.policy,
                &p.rec,
                &p.enc,
                &sessions,
                &h0,
                SampleMode::Sample,
                true,
                epoch as u64,
            )?;
            let w = 1.0 / (users.len() * grads.count.max(1)) as f64;
            if let Some(g) = &grads.policy {
                g_policy.add_scaled(g, w)?;
            }
            if let Some(g) = &grads.rec {
                g_rec.add_scaled(g, w)?;
            }
            if let Some(g) = &grads.enc {
                g_enc.add_scaled(g, w)?;
            }
            eps.extend(q);
        }
        optim.step_global(p, &g_policy, &g_rec, &g_enc, epoch)?;
        let sr = eps.iter().filter(|e| e.succeeded()).count() as f64 / eps.len().max(1) as f64;
        Ok(EpochStats {
            epoch,
            users,
            query_sr: sr,
            support_sr: 0.0,
            exploration_sr: 0.0,
        })
    })
}
