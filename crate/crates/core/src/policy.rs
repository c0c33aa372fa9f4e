//! Recurrent conversational policies, their losses, and the episode rollout
//! loop shared by training, evaluation and the chat REPL.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::dialogue::{
    build_action_space, rank_items, slate_for, Action, ActionSpace, Candidate, DialogueState, Feedback, Outcome,
    TurnRecord,
};
use crate::encoder::{encode, EmbeddingVars};
use crate::error::{ensure, Error, Result};
use crate::numerics::{Bound, Graph, ParamSet, Tensor, Var};
use crate::recommender::{score_items, TurnScores};
use crate::simulator::{Episode, EpisodeKind, RewardSpec, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub reward_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            reward_dim: 10,
        }
    }
}

/// GRU policy parameters; `with_posterior` adds the user-posterior projection
/// used by the exploration policy.
pub fn init_policy<R: Rng>(dim: usize, cfg: &PolicyConfig, with_posterior: bool, rng: &mut R) -> ParamSet {
    let h = cfg.hidden;
    let input = 2 * dim + cfg.reward_dim;
    let std = 1.0 / (h as f64).sqrt();
    let mut ps = ParamSet::new();
    ps.init_normal("gru.w_ih", &[3 * h, input], std, rng);
    ps.init_normal("gru.w_hh", &[3 * h, h], std, rng);
    ps.insert("gru.b_ih", Tensor::zeros(&[3 * h]));
    ps.insert("gru.b_hh", Tensor::zeros(&[3 * h]));
    ps.init_normal("head.w", &[dim, h], std, rng);
    ps.insert("head.b", Tensor::zeros(&[dim]));
    ps.init_normal("reward.w", &[cfg.reward_dim, 1], 1.0, rng);
    ps.insert("reward.b", Tensor::zeros(&[cfg.reward_dim]));
    if with_posterior {
        ps.init_normal("posterior.w", &[dim, h], std, rng);
        ps.insert("posterior.b", Tensor::zeros(&[dim]));
    }
    ps
}

pub fn hidden_size(params: &ParamSet) -> Result<usize> {
    Ok(params.tensor("gru.w_hh")?.cols())
}

/// One GRU update (PyTorch gate layout r, z, n).
fn gru_cell(g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
    let n = g.value(h).len();
    let gi = g.linear(p.var("gru.w_ih")?, p.var("gru.b_ih")?, x)?;
    let gh = g.linear(p.var("gru.w_hh")?, p.var("gru.b_hh")?, h)?;
    let part = |g: &mut Graph, v: Var, k: usize| g.slice(v, k * n, n);
    let (ir, iz, inn) = (part(g, gi, 0)?, part(g, gi, 1)?, part(g, gi, 2)?);
    let (hr, hz, hn) = (part(g, gh, 0)?, part(g, gh, 1)?, part(g, gh, 2)?);
    let r = g.add(ir, hr)?;
    let r = g.sigmoid(r)?;
    let z = g.add(iz, hz)?;
    let z = g.sigmoid(z)?;
    let rn = g.mul(r, hn)?;
    let cand = g.add(inn, rn)?;
    let cand = g.tanh(cand)?;
    // h' = (1 − z)·n + z·h = n + z·(h − n)
    let diff = g.sub(h, cand)?;
    let zd = g.mul(z, diff)?;
    g.add(cand, zd)
}

/// Embedding rows of the actions in `space`, attributes first.
pub fn action_embeddings(g: &mut Graph, emb: &EmbeddingVars, space: &ActionSpace) -> Result<Var> {
    ensure!(!space.is_empty(), Contract, "empty action space");
    let mut parts = Vec::with_capacity(2);
    if !space.attrs.is_empty() {
        parts.push(g.gather(emb.attrs, &space.attrs)?);
    }
    if !space.items.is_empty() {
        parts.push(g.gather(emb.items, &space.items)?);
    }
    g.stack_rows(&parts)
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Log-probabilities over the action space.
    pub log_probs: Var,
    pub h: Var,
}

/// Consumes `[s_t; e_{a_{t−1}}; enc(r_{t−1})]`, updates the hidden state and
/// scores each available action as `(W h_t + b)·e_a`.
pub fn policy_step(
    g: &mut Graph,
    p: &Bound,
    h_prev: Var,
    s: Var,
    prev_action: Var,
    prev_reward: f64,
    action_embs: Var,
) -> Result<StepOutput> {
    let r_in = g.constant_vec(vec![prev_reward])?;
    let r_enc = g.linear(p.var("reward.w")?, p.var("reward.b")?, r_in)?;
    let x = g.concat(&[s, prev_action, r_enc])?;
    let h = gru_cell(g, p, x, h_prev)?;
    let q = g.linear(p.var("head.w")?, p.var("head.b")?, h)?;
    let logits = g.matvec(action_embs, q)?;
    let log_probs = g.log_softmax(logits)?;
    Ok(StepOutput { log_probs, h })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Sample,
    Greedy,
}

/// Index drawn from `probs`, or the argmax with ties to the lower index.
pub fn sample_action<R: Rng>(probs: &[f64], rng: &mut R, mode: SampleMode) -> usize {
    match mode {
        SampleMode::Greedy => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            best
        }
        SampleMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
        }
    }
}

/// `−Σ_t R_t log π(a_t|s_t)` with returns held constant.
pub fn reinforce_loss(g: &mut Graph, log_probs: &[Var], returns: &[f64]) -> Result<Var> {
    ensure!(
        log_probs.len() == returns.len(),
        Contract,
        "{} log-probs for {} returns",
        log_probs.len(),
        returns.len()
    );
    ensure!(!log_probs.is_empty(), Contract, "empty episode");
    let mut terms = Vec::with_capacity(log_probs.len());
    for (&lp, &r) in log_probs.iter().zip(returns) {
        terms.push(g.scale(lp, -r)?);
    }
    g.add_scalars(&terms)
}

/// Log-posterior over training users: `log softmax_u((W h + b)·e_u)`.
pub fn user_posterior(g: &mut Graph, p: &Bound, h: Var, users: Var) -> Result<Var> {
    ensure!(g.value(users).rows() > 0, Contract, "no training users");
    let q = g.linear(p.var("posterior.w")?, p.var("posterior.b")?, h)?;
    let logits = g.matvec(users, q)?;
    g.log_softmax(logits)
}

/// `r_e(t) = log P(u|h_t) − log P(u|h_{t−1})`, with a uniform prior over
/// `n_users` before the first turn.
pub fn exploration_rewards(log_post_true: &[f64], n_users: usize) -> Vec<f64> {
    let mut prev = -(n_users as f64).ln();
    log_post_true
        .iter()
        .map(|&lp| {
            let r = lp - prev;
            prev = lp;
            r
        })
        .collect()
}

/// `−Σ_t R_e(t) log π(a_t) − Σ_t log P(u|h_t)`.
pub fn exploration_loss(g: &mut Graph, log_probs: &[Var], returns_e: &[f64], log_post_true: &[Var]) -> Result<Var> {
    ensure!(
        log_post_true.len() == log_probs.len(),
        Contract,
        "posterior recorded on {} of {} turns",
        log_post_true.len(),
        log_probs.len()
    );
    let pg = reinforce_loss(g, log_probs, returns_e)?;
    let ce = g.add_scalars(log_post_true)?;
    let ce = g.scale(ce, -1.0)?;
    g.add(pg, ce)
}

/// Copies the final hidden state out of the graph; the next episode starts
/// from a fresh constant, so no gradient crosses the boundary.
pub fn handoff_hidden(g: &Graph, h: Var) -> Vec<f64> {
    g.value(h).data().to_vec()
}

/// Whoever answers the agent: the simulator or a person.
pub trait Responder {
    fn respond(&mut self, state: &DialogueState, action: &Action) -> Result<(Feedback, f64)>;
}

pub struct SimResponder<'a> {
    pub session: &'a Session,
    pub catalog: &'a Catalog,
    pub rewards: &'a RewardSpec,
}

impl Responder for SimResponder<'_> {
    fn respond(&mut self, state: &DialogueState, action: &Action) -> Result<(Feedback, f64)> {
        self.session.respond(self.catalog, self.rewards, state, action)
    }
}

/// Networks bound on one episode graph.
pub struct Nets {
    pub policy: Bound,
    pub rec: Bound,
    pub enc: Bound,
    pub emb: EmbeddingVars,
    /// Training-user embedding rows, for the exploration posterior.
    pub train_users: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutOptions {
    pub k_a: usize,
    pub k_i: usize,
    pub k_rec: usize,
    pub max_turns: usize,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            k_a: 10,
            k_i: 10,
            k_rec: 10,
            max_turns: 10,
        }
    }
}

/// What a replay needs to recompute one turn exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub space: ActionSpace,
    pub choice: usize,
}

/// Graph handles recorded while running an episode.
#[derive(Debug)]
pub struct Rollout {
    pub episode: Episode,
    pub steps: Vec<StepRecord>,
    /// `log π(a_t|s_t)` of each chosen action.
    pub chosen: Vec<Var>,
    pub rec_turns: Vec<TurnScores>,
    /// `log P(u|h_t)` of the true user, when requested.
    pub log_post_true: Vec<Var>,
    pub h_final: Vec<f64>,
}

impl Rollout {
    pub fn log_post_values(&self, g: &Graph) -> Vec<f64> {
        self.log_post_true.iter().map(|&v| g.scalar(v)).collect()
    }
}

struct TurnOut {
    space: ActionSpace,
    ranked: Vec<usize>,
    scores: Option<TurnScores>,
    step: StepOutput,
    action_embs: Var,
}

#[allow(clippy::too_many_arguments)]
fn turn_forward(
    g: &mut Graph,
    nets: &Nets,
    catalog: &Catalog,
    state: &DialogueState,
    forced_space: Option<&ActionSpace>,
    h: Var,
    prev_action: Var,
    prev_reward: f64,
    opts: &RolloutOptions,
) -> Result<Option<TurnOut>> {
    let s = encode(g, &nets.enc, &nets.emb, state)?.s;
    let (ranked, scores) = if state.candidates().is_empty() {
        (Vec::new(), None)
    } else {
        let sc = score_items(g, &nets.rec, &nets.emb, s, state.candidates())?;
        let ranked = rank_items(state.candidates(), g.value(sc).data());
        (
            ranked,
            Some(TurnScores {
                candidates: state.candidates().to_vec(),
                scores: sc,
            }),
        )
    };
    let space = match forced_space {
        Some(sp) => sp.clone(),
        None => build_action_space(state, catalog, &ranked, opts.k_a, opts.k_i)?,
    };
    if space.is_empty() {
        return Ok(None);
    }
    let action_embs = action_embeddings(g, &nets.emb, &space)?;
    let step = policy_step(g, &nets.policy, h, s, prev_action, prev_reward, action_embs)?;
    Ok(Some(TurnOut {
        space,
        ranked,
        scores,
        step,
        action_embs,
    }))
}

fn action_for(space: &ActionSpace, choice: usize, ranked: &[usize], k_rec: usize) -> Result<Action> {
    match space.get(choice) {
        Some(Candidate::Attr(p)) => Ok(Action::Ask { attr: p }),
        Some(Candidate::Item(v)) => Ok(Action::Recommend {
            items: slate_for(v, ranked, k_rec),
        }),
        None => Err(Error::Index(format!("action {choice} outside space of {}", space.len()))),
    }
}

/// How the next action is picked during a rollout.
pub enum Chooser<'a, R: Rng> {
    Policy { rng: &'a mut R, mode: SampleMode },
    /// Replays recorded choices; the recorded action spaces are reused too.
    Forced(&'a [StepRecord]),
}

/// Runs one conversation on `g`.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng>(
    g: &mut Graph,
    nets: &Nets,
    catalog: &Catalog,
    responder: &mut dyn Responder,
    meta: (usize, EpisodeKind, usize),
    h0: &[f64],
    opts: &RolloutOptions,
    mut chooser: Chooser<'_, R>,
    true_user: Option<usize>,
) -> Result<Rollout> {
    let (user, kind, target) = meta;
    let dim = g.value(nets.emb.items).cols();
    let mut state = DialogueState::new(catalog.n_items(), opts.max_turns)?;
    let mut h = g.constant_vec(h0.to_vec())?;
    let mut prev_action = g.constant_vec(vec![0.0; dim])?;
    let mut prev_reward = 0.0;
    let mut out = Rollout {
        episode: Episode {
            user,
            kind,
            target,
            turns: Vec::new(),
            outcome: Outcome::Ongoing,
        },
        steps: Vec::new(),
        chosen: Vec::new(),
        rec_turns: Vec::new(),
        log_post_true: Vec::new(),
        h_final: h0.to_vec(),
    };
    while !state.is_terminal() {
        let t = state.turn();
        let forced = match &chooser {
            Chooser::Forced(steps) => Some(
                steps
                    .get(t)
                    .ok_or_else(|| Error::Contract(format!("no recorded step for turn {t}")))?,
            ),
            Chooser::Policy { .. } => None,
        };
        let Some(turn) = turn_forward(
            g,
            nets,
            catalog,
            &state,
            forced.map(|f| &f.space),
            h,
            prev_action,
            prev_reward,
            opts,
        )?
        else {
            break;
        };
        let choice = match &mut chooser {
            Chooser::Forced(_) => forced.map(|f| f.choice).unwrap_or(0),
            Chooser::Policy { rng, mode } => {
                let probs: Vec<f64> = g.value(turn.step.log_probs).data().iter().map(|l| l.exp()).collect();
                sample_action(&probs, *rng, *mode)
            }
        };
        ensure!(choice < turn.space.len(), Index, "choice {choice} outside action space");
        let action = action_for(&turn.space, choice, &turn.ranked, opts.k_rec)?;
        let (feedback, reward) = responder.respond(&state, &action)?;
        out.chosen.push(g.pick(turn.step.log_probs, choice)?);
        if let Some(sc) = turn.scores {
            out.rec_turns.push(sc);
        }
        if let (Some(u), Some(users)) = (true_user, nets.train_users) {
            let post = user_posterior(g, &nets.policy, turn.step.h, users)?;
            out.log_post_true.push(g.pick(post, u)?);
        }
        out.episode.turns.push(TurnRecord {
            turn: t,
            action: action.clone(),
            feedback,
            reward,
            candidates: state.candidates().len(),
        });
        out.steps.push(StepRecord {
            space: turn.space,
            choice,
        });
        state = state.apply_feedback(catalog, &action, feedback)?;
        h = turn.step.h;
        prev_action = g.gather(turn.action_embs, &[choice])?;
        prev_action = g.mean_rows(prev_action)?;
        prev_reward = reward;
    }
    out.episode.outcome = match state.outcome() {
        Outcome::Ongoing => Outcome::Quit,
        o => o,
    };
    out.h_final = handoff_hidden(g, h);
    Ok(out)
}

/// Replays recorded feedback for a [`Chooser::Forced`] rollout.
pub struct ReplayResponder<'a> {
    turns: &'a [TurnRecord],
    next: usize,
}

impl<'a> ReplayResponder<'a> {
    pub fn new(turns: &'a [TurnRecord]) -> Self {
        Self { turns, next: 0 }
    }
}

impl Responder for ReplayResponder<'_> {
    fn respond(&mut self, _state: &DialogueState, action: &Action) -> Result<(Feedback, f64)> {
        let rec = self
            .turns
            .get(self.next)
            .ok_or_else(|| Error::Contract("replay ran past the recorded episode".into()))?;
        ensure!(&rec.action == action, Contract, "replayed action diverged at turn {}", self.next);
        self.next += 1;
        Ok((rec.feedback, rec.reward))
    }
}
