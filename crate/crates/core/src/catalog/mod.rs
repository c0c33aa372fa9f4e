//! Users, items, attributes and the data preparation that precedes any
//! conversation: ingestion, user splits, embedding pretraining, preference
//! sets, attribute augmentation and interaction synthesis.

mod dataset;
mod fm;
mod generator;
mod io;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use dataset::{prepare_dataset, pretrain_stage, synthesize_stage, DataConfig, Dataset, EMBEDDINGS_FILE};
pub use fm::{pairwise_auc, pretrain_fm, EmbeddingTable, FmConfig, FmReport};
pub use generator::{generate_catalog, SyntheticSpec};
pub use io::{INTERACTIONS_FILE, ITEM_ATTRS_FILE, PROFILES_FILE, load_catalog, load_profiles, save_catalog, save_profiles};
pub use split::{split_users, Role, SplitAssignment, SplitRatios};
pub use synth::{augment_item_attributes, build_user_profiles, synthesize_interactions, SynthScore, UserProfile};

use crate::error::{ensure, Result};

/// Users, items, per-item attribute sets and observed interactions.
/// All ids are dense zero-based integers.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    n_users: usize,
    n_attrs: usize,
    item_attrs: Vec<Vec<usize>>,
    interactions: Vec<(usize, usize)>,
}

impl Catalog {
    /// Builds and validates a catalog. Attribute sets are sorted and deduplicated.
    pub fn new(
        n_users: usize,
        n_attrs: usize,
        mut item_attrs: Vec<Vec<usize>>,
        interactions: Vec<(usize, usize)>,
    ) -> Result<Self> {
        for attrs in &mut item_attrs {
            attrs.sort_unstable();
            attrs.dedup();
        }
        let catalog = Self {
            n_users,
            n_attrs,
            item_attrs,
            interactions,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.n_users > 0, Validation, "catalog has no users");
        ensure!(!self.item_attrs.is_empty(), Validation, "catalog has no items");
        ensure!(self.n_attrs > 0, Validation, "catalog has no attributes");
        ensure!(!self.interactions.is_empty(), Validation, "catalog has no interactions");
        for (v, attrs) in self.item_attrs.iter().enumerate() {
            ensure!(!attrs.is_empty(), Validation, "item {v} has no attributes");
            if let Some(p) = attrs.iter().find(|&&p| p >= self.n_attrs) {
                return Err(crate::Error::Validation(format!(
                    "item {v} references attribute {p} but only {} exist",
                    self.n_attrs
                )));
            }
        }
        for &(u, v) in &self.interactions {
            ensure!(u < self.n_users, Validation, "interaction references unknown user {u}");
            ensure!(v < self.item_attrs.len(), Validation, "interaction references unknown item {v}");
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.item_attrs.len()
    }

    pub fn n_attrs(&self) -> usize {
        self.n_attrs
    }

    pub fn item_attrs(&self, item: usize) -> &[usize] {
        &self.item_attrs[item]
    }

    pub fn all_item_attrs(&self) -> &[Vec<usize>] {
        &self.item_attrs
    }

    pub fn item_has_attr(&self, item: usize, attr: usize) -> bool {
        self.item_attrs[item].binary_search(&attr).is_ok()
    }

    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    /// Same items and attributes, different interaction list.
    pub fn with_interactions(&self, interactions: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(self.n_users, self.n_attrs, self.item_attrs.clone(), interactions)
    }

    /// Items per user, in interaction-list order.
    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for &(u, v) in &self.interactions {
            out[u].push(v);
        }
        out
    }

    pub fn stats(&self, profiles: Option<&[UserProfile]>) -> CatalogStats {
        let avg_item_attrs =
            self.item_attrs.iter().map(Vec::len).sum::<usize>() as f64 / self.n_items() as f64;
        let (avg_pref, avg_overlap) = match profiles {
            Some(ps) if !ps.is_empty() => {
                let avg_pref = ps.iter().map(|p| p.pref_attrs.len()).sum::<usize>() as f64 / ps.len() as f64;
                let mut by_user = vec![None; self.n_users];
                for p in ps {
                    if p.user < self.n_users {
                        by_user[p.user] = Some(&p.pref_attrs);
                    }
                }
                let mut total = 0usize;
                let mut count = 0usize;
                for &(u, v) in &self.interactions {
                    if let Some(pref) = by_user[u] {
                        total += pref.iter().filter(|p| self.item_has_attr(v, **p)).count();
                        count += 1;
                    }
                }
                let avg_overlap = (count > 0).then(|| total as f64 / count as f64);
                (Some(avg_pref), avg_overlap)
            }
            _ => (None, None),
        };
        CatalogStats {
            users: self.n_users,
            items: self.n_items(),
            attributes: self.n_attrs,
            interactions: self.interactions.len(),
            avg_pref_attrs: avg_pref,
            avg_item_attrs,
            avg_overlap_attrs: avg_overlap,
        }
    }
}

/// Summary counts of a catalog; averages are exact arithmetic means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogStats {
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub interactions: usize,
    pub avg_pref_attrs: Option<f64>,
    pub avg_item_attrs: f64,
    pub avg_overlap_attrs: Option<f64>,
}
