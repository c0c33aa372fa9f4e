use crate::encoder::EmbeddingVars;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet};
use crate::policy::{exploration_loss, exploration_rewards, reinforce_loss, rollout, Chooser, Nets, SampleMode, SimResponder};
use crate::recommender::recommendation_loss;
use crate::rng::{purpose, stream};
use crate::simulator::{returns, Episode, Session};

use super::Env;

/// Which parameters an episode produces gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Learn {
    /// Forward only.
    None,
    /// `L_e` w.r.t. the exploration policy and the encoder.
    Explore,
    /// `L_u + L_r` w.r.t. the policy and the recommender.
    Adapt,
    /// `L_u + L_r` w.r.t. the policy, the recommender and the encoder.
    Query,
}

#[derive(Debug)]
pub struct EpisodeOut {
    pub episode: Episode,
    pub h_final: Vec<f64>,
    pub loss: Option<f64>,
    pub policy_grad: Option<ParamSet>,
    pub rec_grad: Option<ParamSet>,
    pub enc_grad: Option<ParamSet>,
    /// `log P(u|h_t)` per turn, for exploration episodes of training users.
    pub log_post: Vec<f64>,
}

/// Runs one simulated conversation under `policy` and, unless `learn` is
/// [`Learn::None`], backpropagates the matching loss.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    env: &Env<'_>,
    policy: &ParamSet,
    rec: &ParamSet,
    enc: &ParamSet,
    session: &Session,
    h0: &[f64],
    mode: SampleMode,
    learn: Learn,
    round: u64,
) -> Result<EpisodeOut> {
    let ds = env.ds;
    let cfg = &env.cfg;
    let mut g = Graph::new();
    let pb = g.bind(policy, learn != Learn::None);
    let rb = g.bind(rec, matches!(learn, Learn::Adapt | Learn::Query));
    let eb = g.bind(enc, matches!(learn, Learn::Explore | Learn::Query));
    let emb = EmbeddingVars::bind(&mut g, &ds.embeddings, false);
    let true_user = if learn == Learn::Explore {
        env.train_pos[session.user]
    } else {
        None
    };
    let train_users = true_user.map(|_| g.constant(env.train_table.clone()));
    let nets = Nets {
        policy: pb,
        rec: rb,
        enc: eb,
        emb,
        train_users,
    };
    let mut rng = stream(
        cfg.seed,
        &[purpose::ACTIONS, session.user as u64, round, session.index as u64],
    );
    let mut responder = SimResponder {
        session,
        catalog: &ds.catalog,
        rewards: &cfg.rewards,
    };
    let out = rollout(
        &mut g,
        &nets,
        &ds.catalog,
        &mut responder,
        (session.user, session.kind, session.target),
        h0,
        &cfg.rollout,
        Chooser::Policy { rng: &mut rng, mode },
        true_user,
    )?;
    let log_post = out.log_post_values(&g);
    let mut result = EpisodeOut {
        episode: out.episode,
        h_final: out.h_final,
        loss: None,
        policy_grad: None,
        rec_grad: None,
        enc_grad: None,
        log_post,
    };
    if learn == Learn::None || out.chosen.is_empty() {
        return Ok(result);
    }
    let loss = match learn {
        Learn::Explore => {
            if true_user.is_none() {
                return Ok(result);
            }
            let r_e = exploration_rewards(&result.log_post, env.train_users.len());
            let big_r = returns(&r_e, cfg.rewards.gamma);
            exploration_loss(&mut g, &out.chosen, &big_r, &out.log_post_true)?
        }
        _ => {
            let big_r = returns(&result.episode.rewards(), cfg.rewards.gamma);
            let l_u = reinforce_loss(&mut g, &out.chosen, &big_r)?;
            match recommendation_loss(
                &mut g,
                &out.rec_turns,
                result.episode.target,
                result.episode.success_turns(),
            )? {
                Some(l_r) => g.add(l_u, l_r)?,
                None => l_u,
            }
        }
    };
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss for user {} episode {}",
            session.user, session.index
        )));
    }
    g.backward(loss)?;
    result.loss = Some(value);
    result.policy_grad = Some(g.collect_grads(&nets.policy, policy)?);
    if matches!(learn, Learn::Adapt | Learn::Query) {
        result.rec_grad = Some(g.collect_grads(&nets.rec, rec)?);
    }
    if matches!(learn, Learn::Explore | Learn::Query) {
        result.enc_grad = Some(g.collect_grads(&nets.enc, enc)?);
    }
    Ok(result)
}
