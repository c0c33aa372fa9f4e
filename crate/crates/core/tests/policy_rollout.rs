//! Rollouts through the full encoder, recurrent policy and recommender stack.

mod common;

use common::{composite_gradcheck, composite_loss, composite_params, record_successful, small_dataset};
use metacrs::encoder::EmbeddingVars;
use metacrs::numerics::Graph;
use metacrs::policy::{rollout, Chooser, Nets, ReplayResponder, RolloutOptions, SampleMode, SimResponder};
use metacrs::rng::stream;
use metacrs::simulator::RewardSpec;
use rand_chacha::ChaCha8Rng;

fn opts() -> RolloutOptions {
    RolloutOptions {
        k_a: 3,
        k_i: 3,
        k_rec: 3,
        max_turns: 5,
    }
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let report = composite_gradcheck(1, 100);
    assert_eq!(report.checked, 100);
    assert!(report.passed(), "max rel err {} at {:?}", report.max_rel_err, report.worst);
}

#[test]
fn forced_replay_reproduces_the_episode() {
    let ds = small_dataset(2);
    let ps = composite_params(ds.embeddings.dim(), 2);
    let rec = record_successful(&ds, &ps, &opts(), 2);
    let (a, _) = composite_loss(&ds, &ps, &rec, &opts(), false).unwrap();
    let (b, _) = composite_loss(&ds, &ps, &rec, &opts(), false).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let mut g = Graph::new();
    let bound = g.bind(&ps, false);
    let nets = Nets {
        policy: bound.clone(),
        rec: bound.clone(),
        enc: bound,
        emb: EmbeddingVars::bind(&mut g, &ds.embeddings, false),
        train_users: None,
    };
    let out = rollout::<ChaCha8Rng>(
        &mut g,
        &nets,
        &ds.catalog,
        &mut ReplayResponder::new(&rec.episode.turns),
        (rec.episode.user, rec.episode.kind, rec.episode.target),
        &rec.h0,
        &opts(),
        Chooser::Forced(&rec.steps),
        None,
    )
    .unwrap();
    assert_eq!(out.episode, rec.episode);
    assert_eq!(out.steps, rec.steps);
}

#[test]
fn replay_rejects_diverging_actions() {
    let ds = small_dataset(3);
    let ps = composite_params(ds.embeddings.dim(), 3);
    let mut rec = record_successful(&ds, &ps, &opts(), 3);
    let other = (rec.steps[0].choice + 1) % rec.steps[0].space.len();
    rec.steps[0].choice = other;
    assert!(composite_loss(&ds, &ps, &rec, &opts(), false).is_err());
}

#[test]
fn hidden_state_changes_the_policy() {
    let ds = small_dataset(4);
    let ps = composite_params(ds.embeddings.dim(), 4);
    let rec = record_successful(&ds, &ps, &opts(), 4);
    let mut shifted = rec;
    let (a, _) = composite_loss(&ds, &ps, &shifted, &opts(), false).unwrap();
    for x in &mut shifted.h0 {
        *x += 0.5;
    }
    let (b, _) = composite_loss(&ds, &ps, &shifted, &opts(), false).unwrap();
    assert!((a - b).abs() > 1e-9);
}

#[test]
fn greedy_rollouts_are_deterministic_and_bounded() {
    let ds = small_dataset(5);
    let ps = composite_params(ds.embeddings.dim(), 5);
    let items = ds.catalog.items_by_user();
    let rewards = RewardSpec::default();
    let u = ds.users(metacrs::catalog::Role::Test)[0];
    let sessions = metacrs::simulator::plan_sessions(
        &ds.catalog,
        u,
        &items[u],
        &ds.profile(u).pref_attrs,
        metacrs::simulator::Budget::default(),
        5,
        0,
    )
    .unwrap();
    let run = |seed: u64| {
        let mut g = Graph::new();
        let bound = g.bind(&ps, false);
        let nets = Nets {
            policy: bound.clone(),
            rec: bound.clone(),
            enc: bound,
            emb: EmbeddingVars::bind(&mut g, &ds.embeddings, false),
            train_users: None,
        };
        let mut rng = stream(seed, &[]);
        let s = &sessions[0];
        rollout(
            &mut g,
            &nets,
            &ds.catalog,
            &mut SimResponder {
                session: s,
                catalog: &ds.catalog,
                rewards: &rewards,
            },
            (u, s.kind, s.target),
            &[0.0; 6],
            &opts(),
            Chooser::Policy {
                rng: &mut rng,
                mode: SampleMode::Greedy,
            },
            None,
        )
        .unwrap()
        .episode
    };
    let a = run(1);
    assert_eq!(a, run(99));
    assert!(!a.turns.is_empty() && a.turns.len() <= 5);
}
