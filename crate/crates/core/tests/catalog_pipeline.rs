//! Data preparation from a generated catalog to a simulation-ready dataset.

mod common;

use std::collections::BTreeSet;

use common::small_data_config;
use metacrs::catalog::{
    generate_catalog, prepare_dataset, pretrain_stage, synthesize_stage, Dataset, Role, SyntheticSpec,
};

#[test]
fn staged_and_one_shot_preparation_agree() {
    let raw = generate_catalog(&SyntheticSpec::small(), 21).unwrap();
    let cfg = small_data_config(21);
    let whole = prepare_dataset(&raw, &cfg).unwrap();
    let (split, emb, _) = pretrain_stage(&raw, &cfg).unwrap();
    let staged = synthesize_stage(&raw, split, emb, &cfg).unwrap();
    assert_eq!(whole.catalog, staged.catalog);
    assert_eq!(whole.profiles, staged.profiles);
    let again = prepare_dataset(&raw, &cfg).unwrap();
    assert_eq!(whole.embeddings, again.embeddings);
}

#[test]
fn every_user_gets_distinct_synthesized_items() {
    let raw = generate_catalog(&SyntheticSpec::small(), 22).unwrap();
    let cfg = small_data_config(22);
    let ds = prepare_dataset(&raw, &cfg).unwrap();
    for (u, items) in ds.catalog.items_by_user().iter().enumerate() {
        assert_eq!(items.len(), cfg.interactions_per_user, "user {u}");
        assert_eq!(items.iter().collect::<BTreeSet<_>>().len(), items.len(), "user {u}");
    }
    let stats = ds.catalog.stats(Some(&ds.profiles));
    assert_eq!(stats.avg_pref_attrs, Some(cfg.k_pref as f64));
    let roles: Vec<usize> = [Role::Train, Role::Validation, Role::Test].iter().map(|&r| ds.users(r).len()).collect();
    assert_eq!(roles.iter().sum::<usize>(), ds.catalog.n_users());
    assert!(roles.iter().all(|&n| n > 0));
}

#[test]
fn saved_dataset_loads_back() {
    let raw = generate_catalog(&SyntheticSpec::small(), 23).unwrap();
    let ds = prepare_dataset(&raw, &small_data_config(23)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.catalog, ds.catalog);
    assert_eq!(back.profiles, ds.profiles);
    assert_eq!(back.split.roles, ds.split.roles);
    assert_eq!(back.embeddings, ds.embeddings);
}
