//! Synthetic catalogs with latent structure, for tests and desk-scale benchmarks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Catalog;
use crate::error::{ensure, Result};
use crate::rng::{purpose, stream};

/// Shape of a generated catalog.
///
/// Attributes, items and users live in a shared latent space. Each item draws
/// its attributes by affinity to its own latent vector and then sits near the
/// mean of those attributes. Users likewise sit near a few liked attributes
/// and pick items by softmax affinity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub min_item_attrs: usize,
    pub max_item_attrs: usize,
    pub interactions_per_user: usize,
    pub latent_dim: usize,
    /// Inverse temperature of user→item choice.
    pub affinity: f64,
    /// Liked attributes anchoring each user; 0 draws users isotropically.
    pub user_attrs: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl SyntheticSpec {
    /// 360 users, 500 items, 30 attributes.
    pub fn desk() -> Self {
        Self {
            n_users: 360,
            n_items: 500,
            n_attrs: 30,
            min_item_attrs: 3,
            max_item_attrs: 5,
            interactions_per_user: 40,
            latent_dim: 8,
            affinity: 2.0,
            user_attrs: 3,
        }
    }

    /// Same counts as the LastFM benchmark.
    pub fn lastfm_shape() -> Self {
        Self {
            n_users: 1801,
            n_items: 7432,
            n_attrs: 33,
            min_item_attrs: 3,
            max_item_attrs: 5,
            interactions_per_user: 40,
            latent_dim: 8,
            affinity: 2.0,
            user_attrs: 3,
        }
    }

    /// A few dozen users for unit tests.
    pub fn small() -> Self {
        Self {
            n_users: 40,
            n_items: 60,
            n_attrs: 12,
            min_item_attrs: 2,
            max_item_attrs: 4,
            interactions_per_user: 12,
            latent_dim: 4,
            affinity: 2.0,
            user_attrs: 2,
        }
    }
}

fn normal_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gumbel-top-k: indices of `k` draws without replacement, probability
/// proportional to `exp(logits)`, in sampling order.
pub(crate) fn gumbel_top_k<R: Rng>(rng: &mut R, logits: &[f64], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (l - (-u.ln()).ln(), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn generate_catalog(spec: &SyntheticSpec, seed: u64) -> Result<Catalog> {
    ensure!(
        spec.min_item_attrs >= 1 && spec.min_item_attrs <= spec.max_item_attrs && spec.max_item_attrs <= spec.n_attrs,
        Contract,
        "item attribute range {}..={} invalid for {} attributes",
        spec.min_item_attrs,
        spec.max_item_attrs,
        spec.n_attrs
    );
    ensure!(
        spec.interactions_per_user >= 1 && spec.interactions_per_user <= spec.n_items,
        Contract,
        "cannot draw {} distinct items from {}",
        spec.interactions_per_user,
        spec.n_items
    );
    let mut rng = stream(seed, &[purpose::CATALOG]);
    let d = spec.latent_dim.max(1);
    let attrs = normal_rows(&mut rng, spec.n_attrs, d);

    let mut item_attrs = Vec::with_capacity(spec.n_items);
    let mut items = Vec::with_capacity(spec.n_items);
    for _ in 0..spec.n_items {
        let anchor: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let logits: Vec<f64> = attrs.iter().map(|a| dot(&anchor, a)).collect();
        let k = rng.gen_range(spec.min_item_attrs..=spec.max_item_attrs);
        let chosen = gumbel_top_k(&mut rng, &logits, k);
        let mut z = vec![0.0; d];
        for &p in &chosen {
            for (zi, ai) in z.iter_mut().zip(&attrs[p]) {
                *zi += ai / k as f64;
            }
        }
        for zi in &mut z {
            *zi += 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        items.push(z);
        item_attrs.push(chosen);
    }

    let users: Vec<Vec<f64>> = if spec.user_attrs == 0 {
        normal_rows(&mut rng, spec.n_users, d)
    } else {
        let k = spec.user_attrs.min(spec.n_attrs);
        (0..spec.n_users)
            .map(|_| {
                let liked = gumbel_top_k(&mut rng, &vec![0.0; spec.n_attrs], k);
                let mut z = vec![0.0; d];
                for &p in &liked {
                    for (zi, ai) in z.iter_mut().zip(&attrs[p]) {
                        *zi += ai / k as f64;
                    }
                }
                for zi in &mut z {
                    *zi += 0.5 * rng.sample::<f64, _>(StandardNormal);
                }
                z
            })
            .collect()
    };
    let mut interactions = Vec::with_capacity(spec.n_users * spec.interactions_per_user);
    for (u, zu) in users.iter().enumerate() {
        let logits: Vec<f64> = items.iter().map(|zv| spec.affinity * dot(zu, zv)).collect();
        for v in gumbel_top_k(&mut rng, &logits, spec.interactions_per_user) {
            interactions.push((u, v));
        }
    }
    Catalog::new(spec.n_users, spec.n_attrs, item_attrs, interactions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_matches_spec() {
        let spec = SyntheticSpec::small();
        let c = generate_catalog(&spec, 1).unwrap();
        assert_eq!(c.n_users(), spec.n_users);
        assert_eq!(c.n_items(), spec.n_items);
        assert_eq!(c.interactions().len(), spec.n_users * spec.interactions_per_user);
        for v in 0..c.n_items() {
            let k = c.item_attrs(v).len();
            assert!((spec.min_item_attrs..=spec.max_item_attrs).contains(&k));
        }
        for items in c.items_by_user() {
            let mut s = items.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), items.len());
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::small();
        assert_eq!(generate_catalog(&spec, 4).unwrap(), generate_catalog(&spec, 4).unwrap());
        assert_ne!(generate_catalog(&spec, 4).unwrap(), generate_catalog(&spec, 5).unwrap());
    }

    #[test]
    fn gumbel_top_k_without_replacement() {
        let mut rng = stream(0, &[]);
        let picks = gumbel_top_k(&mut rng, &[0.0; 9], 9);
        let mut s = picks.clone();
        s.sort_unstable();
        assert_eq!(s, (0..9).collect::<Vec<_>>());
    }
}
