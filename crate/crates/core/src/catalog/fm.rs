//! Pairwise-ranking factorization machine used to pretrain user, item and
//! attribute embeddings.
//!
//! The score of a user–item pair is `e_u·e_v + Σ_{p∈P_v} e_u·e_p`; training
//! maximizes `log σ(y(u,v⁺) − y(u,v⁻))` over observed items `v⁺` against
//! uniformly drawn negatives `v⁻`.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::split::{Role, SplitAssignment};
use super::Catalog;
use crate::error::{ensure, Error, Result};
use crate::numerics::{dot_raw, sigmoid, ParamSet, Tensor};
use crate::rng::{purpose, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub init_std: f64,
    /// Negatives drawn per observed pair.
    pub negatives: usize,
    /// Epochs used to fit embeddings of non-training users with the item and
    /// attribute tables frozen.
    pub fold_in_epochs: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            epochs: 40,
            lr: 0.05,
            reg: 1e-4,
            init_std: 0.1,
            negatives: 1,
            fold_in_epochs: 40,
            seed: 0,
        }
    }
}

/// Pretrained vectors for every user, item and attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub users: Tensor,
    pub items: Tensor,
    pub attrs: Tensor,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.users.row(u)
    }

    pub fn item(&self, v: usize) -> &[f64] {
        self.items.row(v)
    }

    pub fn attr(&self, p: usize) -> &[f64] {
        self.attrs.row(p)
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite() && self.attrs.is_finite()
    }

    /// Random initialization drawn from `N(0, init_std²)`.
    pub fn init(catalog: &Catalog, cfg: &FmConfig) -> Result<Self> {
        ensure!(cfg.dim > 0, Contract, "embedding dimension must be positive");
        let mut rng = stream(cfg.seed, &[purpose::FM, 0]);
        let mut draw = |rows: usize| -> Result<Tensor> {
            let data = (0..rows * cfg.dim)
                .map(|_| cfg.init_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::matrix(rows, cfg.dim, data)
        };
        Ok(Self {
            users: draw(catalog.n_users())?,
            items: draw(catalog.n_items())?,
            attrs: draw(catalog.n_attrs())?,
        })
    }

    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("emb.user", self.users.clone());
        ps.insert("emb.item", self.items.clone());
        ps.insert("emb.attr", self.attrs.clone());
        ps
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        let table = Self {
            users: ps.tensor("emb.user")?.clone(),
            items: ps.tensor("emb.item")?.clone(),
            attrs: ps.tensor("emb.attr")?.clone(),
        };
        ensure!(
            table.users.rank() == 2
                && table.items.rank() == 2
                && table.attrs.rank() == 2
                && table.users.cols() == table.items.cols()
                && table.attrs.cols() == table.items.cols(),
            Validation,
            "embedding tables disagree on dimension"
        );
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_params().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(&ParamSet::load(path)?)
    }

    /// Aggregated item vector `e_v + Σ_{p∈P_v} e_p` that user vectors score against.
    fn item_side(&self, catalog: &Catalog, v: usize) -> Vec<f64> {
        let mut out = self.item(v).to_vec();
        for &p in catalog.item_attrs(v) {
            for (o, a) in out.iter_mut().zip(self.attr(p)) {
                *o += a;
            }
        }
        out
    }

    /// FM score `y(u, v)`.
    pub fn fm_score(&self, catalog: &Catalog, u: usize, v: usize) -> f64 {
        dot_raw(self.user(u), &self.item_side(catalog, v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_auc: f64,
}

/// Trains the embedding table on the interactions of training users, then
/// folds in every other user against the frozen item/attribute tables.
pub fn pretrain_fm(catalog: &Catalog, split: &SplitAssignment, cfg: &FmConfig) -> Result<(EmbeddingTable, FmReport)> {
    ensure!(
        split.roles.len() == catalog.n_users(),
        Contract,
        "split covers {} users, catalog has {}",
        split.roles.len(),
        catalog.n_users()
    );
    let by_user = catalog.items_by_user();
    let train_pairs: Vec<(usize, usize)> = catalog
        .interactions()
        .iter()
        .copied()
        .filter(|&(u, _)| split.roles[u] == Role::Train)
        .collect();
    for u in split.users_with(Role::Train) {
        ensure!(!by_user[u].is_empty(), Contract, "training user {u} has no interactions");
    }

    let mut table = EmbeddingTable::init(catalog, cfg)?;
    let mut rng = stream(cfg.seed, &[purpose::FM, 1]);
    let mut order = train_pairs.clone();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &(u, pos) in &order {
            for _ in 0..cfg.negatives.max(1) {
                let neg = draw_negative(&mut rng, catalog.n_items(), pos);
                total += bpr_update(&mut table, catalog, cfg, u, pos, neg, true);
                count += 1;
            }
        }
        final_loss = total / count.max(1) as f64;
        if !final_loss.is_finite() || !table.is_finite() {
            return Err(Error::Training(format!("fm loss diverged at epoch {epoch}")));
        }
    }

    // Fold-in: fit user vectors only.
    let mut rng = stream(cfg.seed, &[purpose::FM, 2]);
    for epoch in 0..cfg.fold_in_epochs {
        for (u, role) in split.roles.iter().enumerate() {
            if *role == Role::Train {
                continue;
            }
            for &pos in &by_user[u] {
                let neg = draw_negative(&mut rng, catalog.n_items(), pos);
                let l = bpr_update(&mut table, catalog, cfg, u, pos, neg, false);
                if !l.is_finite() {
                    return Err(Error::Training(format!("fold-in diverged at epoch {epoch}")));
                }
            }
        }
    }

    let train_auc = if train_pairs.is_empty() {
        0.5
    } else {
        pairwise_auc(&table, catalog, &train_pairs)
    };
    Ok((
        table,
        FmReport {
            epochs: cfg.epochs,
            final_loss,
            train_auc,
        },
    ))
}

fn draw_negative<R: Rng>(rng: &mut R, n_items: usize, pos: usize) -> usize {
    if n_items == 1 {
        return pos;
    }
    loop {
        let v = rng.gen_range(0..n_items);
        if v != pos {
            return v;
        }
    }
}

/// One SGD step on `−log σ(y(u,pos) − y(u,neg))` plus L2; returns the loss.
fn bpr_update(
    table: &mut EmbeddingTable,
    catalog: &Catalog,
    cfg: &FmConfig,
    u: usize,
    pos: usize,
    neg: usize,
    update_items: bool,
) -> f64 {
    let d = table.dim();
    let side_pos = table.item_side(catalog, pos);
    let side_neg = table.item_side(catalog, neg);
    let eu = table.user(u).to_vec();
    let diff: Vec<f64> = side_pos.iter().zip(&side_neg).map(|(a, b)| a - b).collect();
    let x = dot_raw(&eu, &diff);
    let loss = -log_sigmoid(x);
    let coef = sigmoid(-x);
    let (lr, reg) = (cfg.lr, cfg.reg);

    {
        let user = &mut table.users.data_mut()[u * d..(u + 1) * d];
        for k in 0..d {
            user[k] += lr * (coef * diff[k] - reg * user[k]);
        }
    }
    if update_items {
        let bump = |t: &mut Tensor, row: usize, sign: f64| {
            let r = &mut t.data_mut()[row * d..(row + 1) * d];
            for k in 0..d {
                r[k] += lr * (sign * coef * eu[k] - reg * r[k]);
            }
        };
        bump(&mut table.items, pos, 1.0);
        bump(&mut table.items, neg, -1.0);
        // Attributes shared by both items cancel out.
        for &p in catalog.item_attrs(pos) {
            if !catalog.item_has_attr(neg, p) {
                bump(&mut table.attrs, p, 1.0);
            }
        }
        for &p in catalog.item_attrs(neg) {
            if !catalog.item_has_attr(pos, p) {
                bump(&mut table.attrs, p, -1.0);
            }
        }
    }
    loss
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Mean per-user AUC of the FM score: for each user in `pairs`, the fraction
/// of (observed, unobserved) item pairs ranked correctly, ties counting ½.
/// Items observed in `pairs` are the positives; every other item is a negative.
pub fn pairwise_auc(table: &EmbeddingTable, catalog: &Catalog, pairs: &[(usize, usize)]) -> f64 {
    let mut positives: Vec<HashSet<usize>> = vec![HashSet::new(); catalog.n_users()];
    for &(u, v) in pairs {
        positives[u].insert(v);
    }
    let sides: Vec<Vec<f64>> = (0..catalog.n_items()).map(|v| table.item_side(catalog, v)).collect();
    let mut total = 0.0;
    let mut users = 0usize;
    for (u, pos) in positives.iter().enumerate() {
        if pos.is_empty() || pos.len() == catalog.n_items() {
            continue;
        }
        let eu = table.user(u);
        let mut scored: Vec<(f64, bool)> = sides
            .iter()
            .enumerate()
            .map(|(v, s)| (dot_raw(eu, s), pos.contains(&v)))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Rank-sum AUC with tie averaging.
        let mut rank_sum = 0.0;
        let mut i = 0;
        while i < scored.len() {
            let mut j = i;
            while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
                j += 1;
            }
            let avg_rank = (i + j) as f64 / 2.0 + 1.0;
            rank_sum += avg_rank * scored[i..=j].iter().filter(|s| s.1).count() as f64;
            i = j + 1;
        }
        let n_pos = pos.len() as f64;
        let n_neg = (catalog.n_items() - pos.len()) as f64;
        total += (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
        users += 1;
    }
    if users == 0 {
        0.5
    } else {
        total / users as f64
    }
}
