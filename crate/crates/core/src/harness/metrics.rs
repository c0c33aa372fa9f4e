//! Success rate within the turn limit and average turns.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::simulator::Episode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sr_at: f64,
    pub at: f64,
    pub n: usize,
}

/// SR@T is the fraction of successes; AT averages the turns used, with
/// failed conversations counted as `max_turns`.
pub fn compute_metrics(episodes: &[Episode], max_turns: usize) -> Result<Metrics> {
    ensure!(!episodes.is_empty(), Contract, "no episodes to score");
    let n = episodes.len();
    let successes = episodes.iter().filter(|e| e.succeeded_within(max_turns)).count();
    let turns: usize = episodes.iter().map(|e| e.length(max_turns)).sum();
    Ok(Metrics {
        sr_at: successes as f64 / n as f64,
        at: turns as f64 / n as f64,
        n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub sr_at: f64,
    pub at: f64,
    pub n: usize,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sr_at: f64,
    pub at: f64,
    pub n: usize,
    pub per_user: Vec<UserMetrics>,
}

impl MetricsReport {
    /// Pooled metrics plus one row per user, users in ascending id order.
    pub fn from_episodes(episodes: &[Episode], max_turns: usize) -> Result<Self> {
        let all = compute_metrics(episodes, max_turns)?;
        let mut users: Vec<usize> = episodes.iter().map(|e| e.user).collect();
        users.sort_unstable();
        users.dedup();
        let per_user = users
            .into_iter()
            .map(|u| {
                let eps: Vec<Episode> = episodes.iter().filter(|e| e.user == u).cloned().collect();
                let m = compute_metrics(&eps, max_turns)?;
                Ok(UserMetrics {
                    user: u,
                    sr_at: m.sr_at,
                    at: m.at,
                    n: m.n,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            sr_at: all.sr_at,
            at: all.at,
            n: all.n,
            per_user,
        })
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            sr_at: self.sr_at,
            at: self.at,
            n: self.n,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
