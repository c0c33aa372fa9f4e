//! The simulated user: target sampling, answers and rewards.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::dialogue::{Action, DialogueState, Feedback, Outcome, TurnRecord};
use crate::error::{ensure, Error, Result};
use crate::rng::{purpose, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub rec_suc: f64,
    pub rec_fail: f64,
    pub ask_suc: f64,
    pub ask_fail: f64,
    pub quit: f64,
    pub gamma: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            rec_suc: 1.0,
            rec_fail: -0.1,
            ask_suc: 0.1,
            ask_fail: -0.1,
            quit: -0.3,
            gamma: 0.999,
        }
    }
}

impl RewardSpec {
    pub const MAX_ABS: f64 = 100.0;

    pub fn validate(&self) -> Result<()> {
        let all = [self.rec_suc, self.rec_fail, self.ask_suc, self.ask_fail, self.quit];
        ensure!(
            all.iter().all(|r| r.is_finite() && r.abs() <= Self::MAX_ABS),
            Config,
            "rewards must be finite and at most {} in magnitude",
            Self::MAX_ABS
        );
        ensure!(self.rec_suc > 0.0, Config, "rec_suc must be positive");
        ensure!(
            self.rec_fail <= 0.0 && self.ask_fail <= 0.0 && self.quit <= 0.0,
            Config,
            "failure rewards must be non-positive"
        );
        ensure!((0.0..=1.0).contains(&self.gamma), Config, "gamma must lie in [0, 1]");
        Ok(())
    }

    /// Reward earned by `feedback` in `state`; a turn that ends the
    /// conversation without acceptance earns the quit penalty instead.
    pub fn reward(&self, feedback: Feedback, state: &DialogueState) -> f64 {
        if feedback != Feedback::Accept && state.turn() + 1 >= state.max_turns() {
            return self.quit;
        }
        match feedback {
            Feedback::Confirm => self.ask_suc,
            Feedback::Dismiss => self.ask_fail,
            Feedback::Accept => self.rec_suc,
            Feedback::Reject => self.rec_fail,
        }
    }
}

/// Discounted returns `R_t = Σ_{t'≥t} γ^{t'−t} r_{t'}`.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeKind {
    Exploration,
    Support,
    Query,
}

/// Episodes per user, by stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub exploration: usize,
    pub support: usize,
    pub query: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            exploration: 5,
            support: 10,
            query: 10,
        }
    }
}

impl Budget {
    pub fn total(&self) -> usize {
        self.exploration + self.support + self.query
    }

    pub fn kind_of(&self, index: usize) -> EpisodeKind {
        if index < self.exploration {
            EpisodeKind::Exploration
        } else if index < self.exploration + self.support {
            EpisodeKind::Support
        } else {
            EpisodeKind::Query
        }
    }
}

/// One simulated conversation with a fixed target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user: usize,
    pub index: usize,
    pub kind: EpisodeKind,
    pub target: usize,
    /// `P_u ∩ P_{v*}`, sorted.
    pub overlap: Vec<usize>,
}

impl Session {
    /// The user's answer and the reward it earns.
    pub fn respond(
        &self,
        catalog: &Catalog,
        rewards: &RewardSpec,
        state: &DialogueState,
        action: &Action,
    ) -> Result<(Feedback, f64)> {
        let feedback = match action {
            Action::Ask { attr } => {
                ensure!(*attr < catalog.n_attrs(), Contract, "unknown attribute {attr}");
                if self.overlap.binary_search(attr).is_ok() {
                    Feedback::Confirm
                } else {
                    Feedback::Dismiss
                }
            }
            Action::Recommend { items } => {
                ensure!(!items.is_empty(), Contract, "empty recommendation slate");
                if let Some(v) = items.iter().find(|&&v| v >= catalog.n_items()) {
                    return Err(Error::Contract(format!("unknown item {v}")));
                }
                if items.contains(&self.target) {
                    Feedback::Accept
                } else {
                    Feedback::Reject
                }
            }
        };
        Ok((feedback, rewards.reward(feedback, state)))
    }
}

/// Targets for `budget.total()` consecutive episodes of one user: a shuffled
/// pass over the interactions, then uniform draws with replacement.
pub fn plan_sessions(
    catalog: &Catalog,
    user: usize,
    items: &[usize],
    pref_attrs: &[usize],
    budget: Budget,
    seed: u64,
    round: u64,
) -> Result<Vec<Session>> {
    ensure!(!items.is_empty(), Contract, "user {user} has no interactions");
    let mut rng = stream(seed, &[purpose::TARGETS, user as u64, round]);
    let mut order = items.to_vec();
    order.shuffle(&mut rng);
    let mut pref = pref_attrs.to_vec();
    pref.sort_unstable();
    (0..budget.total())
        .map(|index| {
            let target = if index < order.len() {
                order[index]
            } else {
                items[rng.gen_range(0..items.len())]
            };
            let overlap = catalog
                .item_attrs(target)
                .iter()
                .copied()
                .filter(|p| pref.binary_search(p).is_ok())
                .collect();
            Ok(Session {
                user,
                index,
                kind: budget.kind_of(index),
                target,
                overlap,
            })
        })
        .collect()
}

/// A finished conversation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub user: usize,
    pub kind: EpisodeKind,
    pub target: usize,
    pub turns: Vec<TurnRecord>,
    pub outcome: Outcome,
}

impl Episode {
    pub fn rewards(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.reward).collect()
    }

    pub fn success_turns(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Success { turns } => Some(turns),
            _ => None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.success_turns().is_some()
    }

    /// Accepted within the first `max_turns` turns.
    pub fn succeeded_within(&self, max_turns: usize) -> bool {
        self.success_turns().is_some_and(|k| k <= max_turns)
    }

    /// Number of turns counted by the metrics: turns used on success within
    /// `max_turns`, `max_turns` otherwise.
    pub fn length(&self, max_turns: usize) -> usize {
        match self.success_turns() {
            Some(k) if k <= max_turns => k,
            _ => max_turns,
        }
    }

    /// States before each turn, rebuilt by replaying the recorded feedback.
    pub fn states(&self, catalog: &Catalog, max_turns: usize) -> Result<Vec<DialogueState>> {
        let mut state = DialogueState::new(catalog.n_items(), max_turns)?;
        let mut out = Vec::with_capacity(self.turns.len());
        for t in &self.turns {
            out.push(state.clone());
            state = state.apply_feedback(catalog, &t.action, t.feedback)?;
        }
        Ok(out)
    }
}
