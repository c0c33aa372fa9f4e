use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::catalog::Role;
use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, ParamSet};
use crate::policy::SampleMode;
use crate::rng::{purpose, stream};

use super::adapt::{local_adapt, meta_test, query_episodes};
use super::{Env, MetaParams};

/// Adam states for the four meta bundles.
pub(crate) struct MetaOptim {
    policy: OptimizerState,
    explore: OptimizerState,
    rec: OptimizerState,
    enc: OptimizerState,
}

impl MetaOptim {
    pub(crate) fn new(env: &Env<'_>, p: &MetaParams) -> Self {
        let c = env.cfg.adam();
        Self {
            policy: OptimizerState::adam(c, &p.policy),
            explore: OptimizerState::adam(c, &p.explore),
            rec: OptimizerState::adam(c, &p.rec),
            enc: OptimizerState::adam(c, &p.enc),
        }
    }

    pub(crate) fn step_global(
        &mut self,
        p: &mut MetaParams,
        g_policy: &ParamSet,
        g_rec: &ParamSet,
        g_enc: &ParamSet,
        epoch: usize,
    ) -> Result<()> {
        for (g, what) in [(g_policy, "policy"), (g_rec, "recommender"), (g_enc, "encoder")] {
            finite_or_abort(g, what, epoch)?;
        }
        self.policy.step(&mut p.policy, g_policy)?;
        self.rec.step(&mut p.rec, g_rec)?;
        self.enc.step(&mut p.enc, g_enc)?;
        if !p.is_finite() {
            return Err(Error::Training(format!("parameters diverged in epoch {epoch}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub users: Vec<usize>,
    /// Query-set success rate of the adapted policies (sampled actions).
    pub query_sr: f64,
    pub support_sr: f64,
    pub exploration_sr: f64,
}

fn success_rate(eps: &[crate::simulator::Episode]) -> f64 {
    if eps.is_empty() {
        return 0.0;
    }
    eps.iter().filter(|e| e.succeeded()).count() as f64 / eps.len() as f64
}

fn add_into(acc: &mut ParamSet, g: &Option<ParamSet>, w: f64) -> Result<()> {
    if let Some(g) = g {
        acc.add_scaled(g, w)?;
    }
    Ok(())
}

fn finite_or_abort(g: &ParamSet, what: &str, epoch: usize) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite {what} gradient in epoch {epoch}")))
    }
}

/// One first-order meta-update from `users` (processed in ascending id
/// order so the accumulated gradient does not depend on the batch order).
pub(crate) fn meta_step(
    env: &Env<'_>,
    params: &mut MetaParams,
    optim: &mut MetaOptim,
    users: &[usize],
    epoch: usize,
) -> Result<EpochStats> {
    let mut users = users.to_vec();
    users.sort_unstable();
    let round = epoch as u64;
    let mut g_policy = params.policy.zeros_like();
    let mut g_explore = params.explore.zeros_like();
    let mut g_rec = params.rec.zeros_like();
    let mut g_enc = params.enc.zeros_like();
    let (mut qe, mut se, mut ee) = (Vec::new(), Vec::new(), Vec::new());
    for &u in &users {
        let sessions = env.sessions(u, env.cfg.budget, round)?;
        let a = local_adapt(env, params, &sessions, true, round)?;
        if let Some((ge, gt)) = &a.explore_grads {
            let w = 1.0 / (users.len() * a.explore_learned.max(1)) as f64;
            g_explore.add_scaled(ge, w)?;
            g_enc.add_scaled(gt, w)?;
        }
        let (q, grads) = query_episodes(
            env,
            &a.policy,
            &a.rec,
            &params.enc,
            &sessions,
            &a.h_r,
            SampleMode::Sample,
            true,
            round,
        )?;
        let w = 1.0 / (users.len() * grads.count.max(1)) as f64;
        add_into(&mut g_policy, &grads.policy, w)?;
        add_into(&mut g_rec, &grads.rec, w)?;
        add_into(&mut g_enc, &grads.enc, w)?;
        qe.extend(q);
        se.extend(a.support);
        ee.extend(a.exploration);
    }
    for (g, what) in [(&g_policy, "policy"), (&g_explore, "exploration"), (&g_rec, "recommender"), (&g_enc, "encoder")] {
        finite_or_abort(g, what, epoch)?;
    }
    optim.policy.step(&mut params.policy, &g_policy)?;
    optim.rec.step(&mut params.rec, &g_rec)?;
    optim.enc.step(&mut params.enc, &g_enc)?;
    if env.cfg.budget.exploration > 0 {
        optim.explore.step(&mut params.explore, &g_explore)?;
    }
    if !params.is_finite() {
        return Err(Error::Training(format!("parameters diverged in epoch {epoch}")));
    }
    Ok(EpochStats {
        epoch,
        users,
        query_sr: success_rate(&qe),
        support_sr: success_rate(&se),
        exploration_sr: success_rate(&ee),
    })
}

/// Batch of distinct training users for `epoch`.
pub(crate) fn sample_batch(env: &Env<'_>, epoch: usize) -> Vec<usize> {
    let mut rng = stream(env.cfg.seed, &[purpose::BATCH, epoch as u64]);
    let k = env.cfg.users_per_batch.min(env.train_users().len());
    let mut batch: Vec<usize> = env.train_users().choose_multiple(&mut rng, k).copied().collect();
    batch.sort_unstable();
    batch
}

/// One epoch of meta-training on a sampled batch of training users.
/// Uses a fresh optimizer state; [`meta_train`] keeps one across epochs.
pub fn meta_train_epoch(env: &Env<'_>, params: &MetaParams, users: &[usize], epoch: usize) -> Result<MetaParams> {
    let mut p = params.clone();
    let mut optim = MetaOptim::new(env, &p);
    meta_step(env, &mut p, &mut optim, users, epoch)?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub sr_at: f64,
    pub at: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Writes epoch-numbered checkpoints and a manifest here when set.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochStats)>,
    pub on_validation: Option<&'a mut dyn FnMut(&ValidationPoint)>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Parameters of the best validation epoch.
    pub best: MetaParams,
    pub last: MetaParams,
    pub best_epoch: usize,
    pub history: Vec<ValidationPoint>,
    pub epochs: Vec<EpochStats>,
}

/// Manifest written next to the checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub history: Vec<ValidationPoint>,
}

pub(crate) fn config_hash(cfg: &super::MetaConfig) -> Result<String> {
    let text = serde_json::to_string(cfg)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

fn better(a: &ValidationPoint, b: &ValidationPoint) -> bool {
    a.sr_at > b.sr_at || (a.sr_at == b.sr_at && a.at < b.at)
}

/// Shared epoch loop: `step` performs one update; validation every
/// `validate_every` epochs (and before the first) keeps the best parameters.
pub(crate) fn run_training<F>(
    env: &Env<'_>,
    init: MetaParams,
    mut opts: TrainOptions<'_>,
    validate: &dyn Fn(&MetaParams) -> Result<ValidationPoint>,
    mut step: F,
) -> Result<TrainRun>
where
    F: FnMut(&mut MetaParams, usize) -> Result<EpochStats>,
{
    let cfg = &env.cfg;
    let mut params = init;
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut best = params.clone();
    let mut best_point: Option<ValidationPoint> = None;
    for epoch in 0..=cfg.epochs {
        if epoch % cfg.validate_every == 0 || epoch == cfg.epochs {
            let mut point = validate(&params)?;
            point.epoch = epoch;
            if let Some(cb) = opts.on_validation.as_mut() {
                cb(&point);
            }
            if let Some(dir) = &opts.checkpoint_dir {
                params.save(&dir.join(format!("epoch_{epoch:04}")))?;
            }
            if best_point.as_ref().is_none_or(|b| better(&point, b)) {
                best = params.clone();
                best_point = Some(point.clone());
            }
            history.push(point);
        }
        if epoch == cfg.epochs {
            break;
        }
        let stats = match step(&mut params, epoch) {
            Ok(s) => s,
            Err(e) => {
                if let Some(dir) = &opts.checkpoint_dir {
                    let _ = params.save(&dir.join("diverged"));
                }
                return Err(e);
            }
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&stats);
        }
        epochs.push(stats);
    }
    let best_epoch = best_point.map(|p| p.epoch).unwrap_or(0);
    if let Some(dir) = &opts.checkpoint_dir {
        best.save(&dir.join("best"))?;
        let manifest = Manifest {
            config_hash: config_hash(cfg)?,
            seed: cfg.seed,
            best_epoch,
            history: history.clone(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainRun {
        best,
        last: params,
        best_epoch,
        history,
        epochs,
    })
}

/// Full meta-training with validation on the validation users.
pub fn meta_train(env: &Env<'_>, init: MetaParams, opts: TrainOptions<'_>) -> Result<TrainRun> {
    let valid = env.ds.users(Role::Validation);
    let validate = |p: &MetaParams| -> Result<ValidationPoint> {
        let m = meta_test(env, p, &valid, 0)?.metrics;
        Ok(ValidationPoint {
            epoch: 0,
            sr_at: m.sr_at,
            at: m.at,
        })
    };
    let mut optim = MetaOptim::new(env, &init);
    run_training(env, init, opts, &validate, |p, epoch| {
        let batch = sample_batch(env, epoch);
        meta_step(env, p, &mut optim, &batch, epoch)
    })
}
