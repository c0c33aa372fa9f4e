//! Meta-training, local adaptation and the comparison trainers on a small catalog.

mod common;

use common::{small_dataset, small_meta, telescoping_max_error};
use metacrs::catalog::Role;
use metacrs::encoder::EncoderKind;
use metacrs::metalearn::{
    baseline_finetune, baseline_maxe, local_adapt, meta_test, meta_train, meta_train_epoch, train_global, Env,
    FinetuneMode, MaxEConfig, MetaParams, TrainOptions,
};

#[test]
fn exploration_rewards_telescope() {
    let ds = small_dataset(10);
    let cfg = small_meta(10);
    let params = MetaParams::init(&cfg, ds.embeddings.dim(), 10);
    let (err, checked, largest) = telescoping_max_error(&ds, &cfg, &params, 8);
    assert_eq!(checked, 16);
    assert!(largest > 1e-3);
    assert!(err <= 1e-9, "telescoping error {err}");
}

#[test]
fn meta_update_ignores_user_order() {
    let ds = small_dataset(11);
    let env = Env::new(&ds, small_meta(11)).unwrap();
    let p = MetaParams::init(&env.cfg, env.dim(), 11);
    let users: Vec<usize> = env.train_users()[..3].to_vec();
    let mut reversed = users.clone();
    reversed.reverse();
    let a = meta_train_epoch(&env, &p, &users, 0).unwrap();
    let b = meta_train_epoch(&env, &p, &reversed, 0).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.policy, p.policy);
    assert!(a.is_finite());
}

#[test]
fn zero_step_size_leaves_local_parameters_untouched() {
    let ds = small_dataset(12);
    let mut cfg = small_meta(12);
    cfg.alpha = 0.0;
    let env = Env::new(&ds, cfg).unwrap();
    let p = MetaParams::init(&env.cfg, env.dim(), 12);
    let u = ds.users(Role::Test)[0];
    let sessions = env.sessions(u, env.cfg.budget, 0).unwrap();
    let a = local_adapt(&env, &p, &sessions, false, 0).unwrap();
    assert_eq!(a.policy, p.policy);
    assert_eq!(a.rec, p.rec);
    assert_eq!(a.support.len(), env.cfg.budget.support);
    assert_eq!(a.exploration.len(), env.cfg.budget.exploration);
}

#[test]
fn positive_step_size_adapts() {
    let ds = small_dataset(12);
    let env = Env::new(&ds, small_meta(12)).unwrap();
    let p = MetaParams::init(&env.cfg, env.dim(), 12);
    let u = ds.users(Role::Test)[0];
    let sessions = env.sessions(u, env.cfg.budget, 0).unwrap();
    let a = local_adapt(&env, &p, &sessions, false, 0).unwrap();
    assert_ne!(a.policy, p.policy);
    assert_eq!(a.h_e.len(), env.cfg.policy.hidden);
}

#[test]
fn training_is_deterministic_and_checkpointed() {
    let ds = small_dataset(13);
    let env = Env::new(&ds, small_meta(13)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let init = MetaParams::init(&env.cfg, env.dim(), 13);
    let a = meta_train(
        &env,
        init.clone(),
        TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let b = meta_train(&env, init, TrainOptions::default()).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a.history.len(), 4);
    assert_eq!(a.epochs.len(), 3);
    assert_eq!(MetaParams::load(&dir.path().join("best")).unwrap(), a.best);
    assert!(dir.path().join("epoch_0003").join("policy.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["best_epoch"], a.best_epoch);
}

#[test]
fn no_exploration_keeps_exploration_policy_fixed() {
    let ds = small_dataset(14);
    let mut cfg = small_meta(14);
    cfg.budget.exploration = 0;
    let env = Env::new(&ds, cfg).unwrap();
    let p = MetaParams::init(&env.cfg, env.dim(), 14);
    let users = env.train_users()[..2].to_vec();
    let q = meta_train_epoch(&env, &p, &users, 0).unwrap();
    assert_eq!(q.explore, p.explore);
    assert_ne!(q.policy, p.policy);
}

#[test]
fn linear_encoder_ablation_trains() {
    let ds = small_dataset(15);
    let mut cfg = small_meta(15);
    cfg.encoder.kind = EncoderKind::Linear;
    let env = Env::new(&ds, cfg).unwrap();
    let p = MetaParams::init(&env.cfg, env.dim(), 15);
    assert!(p.enc.get("enc.linear.w").is_some());
    let users = env.train_users()[..2].to_vec();
    let q = meta_train_epoch(&env, &p, &users, 0).unwrap();
    assert_ne!(q.enc, p.enc);
}

#[test]
fn evaluations_cover_every_query_episode() {
    let ds = small_dataset(16);
    let env = Env::new(&ds, small_meta(16)).unwrap();
    let test = ds.users(Role::Test);
    let n = test.len() * env.cfg.budget.query;
    let p = MetaParams::init(&env.cfg, env.dim(), 16);
    let meta = meta_test(&env, &p, &test, 0).unwrap();
    assert_eq!(meta.metrics.n, n);
    assert_eq!(meta.metrics.per_user.len(), test.len());
    assert_eq!(meta_test(&env, &p, &test, 0).unwrap().metrics, meta.metrics);
    let maxe = baseline_maxe(&env, &test, &MaxEConfig::default(), 0).unwrap();
    assert_eq!(maxe.metrics.n, n);
    let global = train_global(&env, p.clone(), TrainOptions::default()).unwrap();
    for mode in [FinetuneMode::Global, FinetuneMode::Ft, FinetuneMode::Ia] {
        let r = baseline_finetune(&env, &global.best, &test, mode, 0).unwrap();
        assert_eq!(r.metrics.n, n, "{mode:?}");
        assert_eq!(r.adaptation.len(), test.len() * env.cfg.finetune_episodes, "{mode:?}");
    }
}
