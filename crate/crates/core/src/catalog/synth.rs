//! Simulation data derived from pretrained embeddings: preferred attribute
//! sets, item attribute augmentation and resampled interactions.

use serde::{Deserialize, Serialize};

use super::generator::gumbel_top_k;
use super::split::{Role, SplitAssignment};
use super::{Catalog, EmbeddingTable};
use crate::error::{ensure, Result};
use crate::numerics::dot_raw;
use crate::rng::{purpose, stream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserProfile {
    pub user: usize,
    pub role: Role,
    /// Sorted ascending.
    pub pref_attrs: Vec<usize>,
}

/// Indices of the `k` largest scores, ties to the lower index.
pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `P_u` = the `k_pref` attributes with the highest `e_u·e_p`.
pub fn build_user_profiles(
    catalog: &Catalog,
    emb: &EmbeddingTable,
    split: &SplitAssignment,
    k_pref: usize,
) -> Result<Vec<UserProfile>> {
    ensure!(
        k_pref >= 1 && k_pref <= catalog.n_attrs(),
        Contract,
        "k_pref={k_pref} outside 1..={}",
        catalog.n_attrs()
    );
    ensure!(
        emb.users.rows() == catalog.n_users() && emb.attrs.rows() == catalog.n_attrs(),
        Contract,
        "embedding table does not cover the catalog"
    );
    ensure!(split.roles.len() == catalog.n_users(), Contract, "split does not cover the catalog");
    Ok((0..catalog.n_users())
        .map(|u| {
            let scores: Vec<f64> = (0..catalog.n_attrs()).map(|p| dot_raw(emb.user(u), emb.attr(p))).collect();
            let mut pref_attrs = top_k(&scores, k_pref);
            pref_attrs.sort_unstable();
            UserProfile {
                user: u,
                role: split.roles[u],
                pref_attrs,
            }
        })
        .collect())
}

/// Extends every `P_v` with its highest-`e_v·e_p` missing attributes until it
/// holds at least `k_item` of them.
pub fn augment_item_attributes(catalog: &Catalog, emb: &EmbeddingTable, k_item: usize) -> Result<Catalog> {
    let k_item = k_item.min(catalog.n_attrs());
    let item_attrs = (0..catalog.n_items())
        .map(|v| {
            let mut attrs = catalog.item_attrs(v).to_vec();
            if attrs.len() < k_item {
                let scores: Vec<f64> = (0..catalog.n_attrs()).map(|p| dot_raw(emb.item(v), emb.attr(p))).collect();
                for p in top_k(&scores, catalog.n_attrs()) {
                    if attrs.len() >= k_item {
                        break;
                    }
                    if !catalog.item_has_attr(v, p) {
                        attrs.push(p);
                    }
                }
            }
            attrs
        })
        .collect();
    Catalog::new(catalog.n_users(), catalog.n_attrs(), item_attrs, catalog.interactions().to_vec())
}

/// Which user–item score drives interaction synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthScore {
    /// `e_u·e_v`.
    Item,
    /// The full FM score, `e_u·(e_v + Σ_{p∈P_v} e_p)`.
    Fm,
}

/// `n` distinct items per user drawn without replacement with probability
/// proportional to `softmax(score(u,v) / temperature)`, in draw order.
pub fn synthesize_interactions(
    catalog: &Catalog,
    emb: &EmbeddingTable,
    n: usize,
    temperature: f64,
    score: SynthScore,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    ensure!(n >= 1, Contract, "need at least one interaction per user");
    ensure!(
        n <= catalog.n_items(),
        Contract,
        "cannot draw {n} distinct items from {}",
        catalog.n_items()
    );
    ensure!(temperature > 0.0, Contract, "temperature must be positive");
    let mut out = Vec::with_capacity(n * catalog.n_users());
    for u in 0..catalog.n_users() {
        let logits: Vec<f64> = (0..catalog.n_items())
            .map(|v| match score {
                SynthScore::Item => dot_raw(emb.user(u), emb.item(v)) / temperature,
                SynthScore::Fm => emb.fm_score(catalog, u, v) / temperature,
            })
            .collect();
        let mut rng = stream(seed, &[purpose::SYNTH, u as u64]);
        out.extend(gumbel_top_k(&mut rng, &logits, n).into_iter().map(|v| (u, v)));
    }
    Ok(out)
}
