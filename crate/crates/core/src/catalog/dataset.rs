use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::PROFILES_FILE;
use super::{
    augment_item_attributes, build_user_profiles, load_catalog, load_profiles, pretrain_fm, save_catalog,
    save_profiles, split_users, synthesize_interactions, Catalog, SynthScore, EmbeddingTable, FmConfig, FmReport, Role,
    SplitAssignment, SplitRatios, UserProfile,
};
use crate::error::{ensure, Error, Result};

pub const EMBEDDINGS_FILE: &str = "embeddings.json";

/// Data preparation settings, from raw catalog to simulation-ready dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub split: SplitRatios,
    pub fm: FmConfig,
    pub k_pref: usize,
    /// Minimum attributes per item after augmentation; 0 disables.
    pub k_item: usize,
    pub interactions_per_user: usize,
    pub synth_temperature: f64,
    pub synth_score: SynthScore,
    /// Replace the observed interactions with synthesized ones (otherwise append).
    pub replace_interactions: bool,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: SplitRatios::default(),
            fm: FmConfig::default(),
            k_pref: 7,
            k_item: 0,
            interactions_per_user: 40,
            synth_temperature: 1.0,
            synth_score: SynthScore::Fm,
            replace_interactions: true,
            seed: 0,
        }
    }
}

/// Everything the simulator, encoder and policies read.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: Catalog,
    pub split: SplitAssignment,
    pub embeddings: EmbeddingTable,
    pub profiles: Vec<UserProfile>,
    pub fm_report: Option<FmReport>,
}

impl Dataset {
    pub fn users(&self, role: Role) -> Vec<usize> {
        self.split.users_with(role)
    }

    pub fn profile(&self, user: usize) -> &UserProfile {
        &self.profiles[user]
    }

    fn validate(&self) -> Result<()> {
        let c = &self.catalog;
        ensure!(
            self.profiles.len() == c.n_users(),
            Validation,
            "{} profiles for {} users",
            self.profiles.len(),
            c.n_users()
        );
        for (u, p) in self.profiles.iter().enumerate() {
            ensure!(p.user == u, Validation, "profiles must be listed by user id, found {} at {u}", p.user);
            ensure!(!p.pref_attrs.is_empty(), Validation, "user {u} has no preferred attributes");
            ensure!(
                p.pref_attrs.iter().all(|&a| a < c.n_attrs()),
                Validation,
                "user {u} prefers an unknown attribute"
            );
        }
        let e = &self.embeddings;
        ensure!(
            e.users.rows() == c.n_users() && e.items.rows() == c.n_items() && e.attrs.rows() == c.n_attrs(),
            Validation,
            "embedding table shape does not match catalog"
        );
        ensure!(e.is_finite(), Validation, "embedding table has non-finite values");
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_catalog(&self.catalog, dir)?;
        save_profiles(&self.profiles, &dir.join(PROFILES_FILE))?;
        self.embeddings.save(&dir.join(EMBEDDINGS_FILE))
    }

    /// Loads a directory written by [`Dataset::save`]. Roles come from the profiles.
    pub fn load(dir: &Path) -> Result<Self> {
        let catalog = load_catalog(dir)?;
        let mut profiles = load_profiles(&dir.join(PROFILES_FILE))?;
        profiles.sort_by_key(|p| p.user);
        let embeddings = EmbeddingTable::load(&dir.join(EMBEDDINGS_FILE))?;
        let split = SplitAssignment {
            roles: profiles.iter().map(|p| p.role).collect(),
            seed: 0,
        };
        let ds = Self {
            catalog,
            split,
            embeddings,
            profiles,
            fm_report: None,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Split users, pretrain embeddings, augment item attributes, derive
/// preference sets and synthesize interactions.
pub fn prepare_dataset(raw: &Catalog, cfg: &DataConfig) -> Result<Dataset> {
    let (split, embeddings, report) = pretrain_stage(raw, cfg)?;
    let mut ds = synthesize_stage(raw, split, embeddings, cfg)?;
    ds.fm_report = Some(report);
    Ok(ds)
}

/// User split and embedding pretraining.
pub fn pretrain_stage(raw: &Catalog, cfg: &DataConfig) -> Result<(SplitAssignment, EmbeddingTable, FmReport)> {
    let split = split_users(raw.n_users(), cfg.split, cfg.seed)?;
    let fm_cfg = FmConfig {
        seed: cfg.seed,
        ..cfg.fm.clone()
    };
    let (embeddings, report) = pretrain_fm(raw, &split, &fm_cfg)?;
    Ok((split, embeddings, report))
}

/// Attribute augmentation, preference sets and interaction synthesis on top
/// of pretrained embeddings.
pub fn synthesize_stage(
    raw: &Catalog,
    split: SplitAssignment,
    embeddings: EmbeddingTable,
    cfg: &DataConfig,
) -> Result<Dataset> {
    ensure!(
        split.roles.len() == raw.n_users(),
        Validation,
        "split covers {} users, catalog has {}",
        split.roles.len(),
        raw.n_users()
    );
    let augmented = augment_item_attributes(raw, &embeddings, cfg.k_item)?;
    let profiles = build_user_profiles(&augmented, &embeddings, &split, cfg.k_pref)?;
    let synthesized = synthesize_interactions(
        &augmented,
        &embeddings,
        cfg.interactions_per_user,
        cfg.synth_temperature,
        cfg.synth_score,
        cfg.seed,
    )?;
    let interactions = if cfg.replace_interactions {
        synthesized
    } else {
        let mut all = augmented.interactions().to_vec();
        all.extend(synthesized);
        all
    };
    let catalog = augmented.with_interactions(interactions)?;
    let ds = Dataset {
        catalog,
        split,
        embeddings,
        profiles,
        fm_report: None,
    };
    ds.validate().map_err(|e| Error::Invariant(e.to_string()))?;
    Ok(ds)
}
