//! Meta-training across users, two-stage local adaptation, meta-testing and
//! the comparison trainers.

mod adapt;
mod baselines;
mod episode;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adapt::{local_adapt, meta_test, query_episodes, Adapted, EvalReport};
pub use baselines::{baseline_finetune, baseline_maxe, train_global, FinetuneMode, MaxEConfig};
pub use episode::{run_episode, EpisodeOut, Learn};
pub use train::{meta_train, meta_train_epoch, EpochStats, TrainOptions, TrainRun, ValidationPoint};

use crate::catalog::{Dataset, Role};
use crate::encoder::{init_encoder, EncoderConfig};
use crate::error::{ensure, Result};
use crate::numerics::{AdamConfig, ParamSet, Tensor};
use crate::policy::{init_policy, PolicyConfig, RolloutOptions};
use crate::recommender::init_recommender;
use crate::rng::{purpose, stream};
use crate::simulator::{plan_sessions, Budget, RewardSpec, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Local (inner-loop) learning rate.
    pub alpha: f64,
    /// Meta learning rate.
    pub beta: f64,
    pub weight_decay: f64,
    pub users_per_batch: usize,
    pub epochs: usize,
    pub validate_every: usize,
    /// Episodes per new user for the fine-tuning baselines.
    pub finetune_episodes: usize,
    pub budget: Budget,
    pub rollout: RolloutOptions,
    pub rewards: RewardSpec,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.005,
            weight_decay: 1e-6,
            users_per_batch: 5,
            epochs: 200,
            validate_every: 5,
            finetune_episodes: 15,
            budget: Budget::default(),
            rollout: RolloutOptions::default(),
            rewards: RewardSpec::default(),
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        self.rewards.validate()?;
        ensure!(self.alpha >= 0.0 && self.alpha.is_finite(), Config, "alpha must be non-negative");
        ensure!(self.beta >= 0.0 && self.beta.is_finite(), Config, "beta must be non-negative");
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay must be non-negative");
        ensure!(self.users_per_batch >= 1, Config, "users_per_batch must be positive");
        ensure!(self.validate_every >= 1, Config, "validate_every must be positive");
        ensure!(self.budget.query >= 1, Config, "need at least one query episode");
        let r = &self.rollout;
        ensure!(r.max_turns >= 1, Config, "max_turns must be positive");
        ensure!(r.k_a + r.k_i >= 1 && r.k_rec >= 1, Config, "action space sizes must be positive");
        ensure!(self.policy.hidden >= 1 && self.policy.reward_dim >= 1, Config, "policy sizes must be positive");
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.beta,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Meta parameters: policy `θ`, exploration policy `θ_e`, recommender `θ_R`
/// and state encoder `θ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub policy: ParamSet,
    pub explore: ParamSet,
    pub rec: ParamSet,
    pub enc: ParamSet,
}

const BUNDLES: [&str; 4] = ["policy", "explore", "rec", "enc"];

impl MetaParams {
    pub fn init(cfg: &MetaConfig, dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[purpose::INIT]);
        let policy = init_policy(dim, &cfg.policy, false, &mut rng);
        let explore = init_policy(dim, &cfg.policy, true, &mut rng);
        let rec = init_recommender(dim, &mut rng);
        let enc = init_encoder(&cfg.encoder, dim, &mut rng);
        Self {
            policy,
            explore,
            rec,
            enc,
        }
    }

    fn bundles(&self) -> [&ParamSet; 4] {
        [&self.policy, &self.explore, &self.rec, &self.enc]
    }

    pub fn is_finite(&self) -> bool {
        self.bundles().iter().all(|p| p.is_finite())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        for (name, p) in BUNDLES.iter().zip(self.bundles()) {
            p.save(&dir.join(format!("{name}.json")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| ParamSet::load(&dir.join(format!("{name}.json")));
        Ok(Self {
            policy: load("policy")?,
            explore: load("explore")?,
            rec: load("rec")?,
            enc: load("enc")?,
        })
    }
}

/// Dataset views shared by every episode of a run.
pub struct Env<'a> {
    pub ds: &'a Dataset,
    pub cfg: MetaConfig,
    items_by_user: Vec<Vec<usize>>,
    train_users: Vec<usize>,
    /// Index of each user among the training users.
    train_pos: Vec<Option<usize>>,
    train_table: Tensor,
}

impl<'a> Env<'a> {
    pub fn new(ds: &'a Dataset, cfg: MetaConfig) -> Result<Self> {
        cfg.validate()?;
        let train_users = ds.users(Role::Train);
        ensure!(!train_users.is_empty(), Validation, "dataset has no training users");
        let dim = ds.embeddings.dim();
        let mut train_pos = vec![None; ds.catalog.n_users()];
        let mut rows = Vec::with_capacity(train_users.len() * dim);
        for (i, &u) in train_users.iter().enumerate() {
            train_pos[u] = Some(i);
            rows.extend_from_slice(ds.embeddings.users.row(u));
        }
        let train_table = Tensor::matrix(train_users.len(), dim, rows)?;
        Ok(Self {
            ds,
            cfg,
            items_by_user: ds.catalog.items_by_user(),
            train_users,
            train_pos,
            train_table,
        })
    }

    /// Same dataset, different settings.
    pub fn with_config(&self, cfg: MetaConfig) -> Result<Env<'a>> {
        Env::new(self.ds, cfg)
    }

    pub fn train_users(&self) -> &[usize] {
        &self.train_users
    }

    pub fn dim(&self) -> usize {
        self.ds.embeddings.dim()
    }

    pub fn hidden(&self) -> usize {
        self.cfg.policy.hidden
    }

    pub fn sessions(&self, user: usize, budget: Budget, round: u64) -> Result<Vec<Session>> {
        plan_sessions(
            &self.ds.catalog,
            user,
            &self.items_by_user[user],
            &self.ds.profile(user).pref_attrs,
            budget,
            self.cfg.seed,
            round,
        )
    }
}

/// Session rounds used at evaluation time, kept apart from training epochs.
pub(crate) const EVAL_ROUND: u64 = 1 << 40;
