//! State encoders: signed feedback embeddings through Transformer layers and
//! cross gates, plus a linear variant for ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::EmbeddingTable;
use crate::dialogue::DialogueState;
use crate::error::{ensure, Result};
use crate::numerics::{Bound, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transgate,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub ff_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Transgate,
            layers: 1,
            ff_dim: 128,
        }
    }
}

/// Embedding tables registered on a graph.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub users: Var,
    pub items: Var,
    pub attrs: Var,
}

impl EmbeddingVars {
    /// `trainable` only matters for gradient checks; training keeps embeddings fixed.
    pub fn bind(g: &mut Graph, table: &EmbeddingTable, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        Self {
            users: leaf(&table.users),
            items: leaf(&table.items),
            attrs: leaf(&table.attrs),
        }
    }
}

/// Output of one encoding: `s = s⁺⊙g⁻ − s⁻⊙g⁺`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub s: Var,
    pub s_pos: Var,
    pub s_neg: Var,
    pub g_pos: Option<Var>,
    pub g_neg: Option<Var>,
}

fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let mut ps = ParamSet::new();
    ps.init_normal("x", shape, std, rng);
    ps.get("x").cloned().unwrap_or_else(|| Tensor::zeros(shape))
}

/// Fresh encoder parameters for embedding dimension `dim`.
pub fn init_encoder<R: Rng>(cfg: &EncoderConfig, dim: usize, rng: &mut R) -> ParamSet {
    let mut ps = ParamSet::new();
    let std = 1.0 / (dim as f64).sqrt();
    match cfg.kind {
        EncoderKind::Transgate => {
            ps.insert("enc.sign_pos", normal(rng, &[dim], 0.1));
            ps.insert("enc.sign_neg", normal(rng, &[dim], 0.1));
            for l in 0..cfg.layers {
                for w in ["wq", "wk", "wv", "wo"] {
                    ps.insert(format!("enc.layer{l}.{w}"), normal(rng, &[dim, dim], std));
                }
                ps.insert(format!("enc.layer{l}.ff1.w"), normal(rng, &[cfg.ff_dim, dim], std));
                ps.insert(format!("enc.layer{l}.ff1.b"), Tensor::zeros(&[cfg.ff_dim]));
                let std2 = 1.0 / (cfg.ff_dim as f64).sqrt();
                ps.insert(format!("enc.layer{l}.ff2.w"), normal(rng, &[dim, cfg.ff_dim], std2));
                ps.insert(format!("enc.layer{l}.ff2.b"), Tensor::zeros(&[dim]));
            }
            for side in ["pos", "neg"] {
                ps.insert(format!("enc.gate_{side}.w"), normal(rng, &[dim, dim], std));
                ps.insert(format!("enc.gate_{side}.b"), Tensor::zeros(&[dim]));
            }
        }
        EncoderKind::Linear => {
            ps.insert("enc.linear.w", normal(rng, &[dim, 2 * dim], 1.0 / (2.0 * dim as f64).sqrt()));
            ps.insert("enc.linear.b", Tensor::zeros(&[dim]));
        }
    }
    ps
}

/// Positive tokens (pooled `V⁺`, then `P⁺`) and negative tokens (pooled `V⁻`,
/// then `P⁻`), raw embeddings. Empty pools are zero vectors.
fn raw_tokens(g: &mut Graph, emb: &EmbeddingVars, state: &DialogueState) -> Result<(Var, Var)> {
    let dim = g.value(emb.items).cols();
    let pool = |g: &mut Graph, items: &[usize]| -> Result<Var> {
        if items.is_empty() {
            g.constant_vec(vec![0.0; dim])
        } else {
            let rows = g.gather(emb.items, items)?;
            g.mean_rows(rows)
        }
    };
    let pooled_pos = pool(g, state.candidates())?;
    let pooled_neg = pool(g, state.rejected_items())?;
    let side = |g: &mut Graph, pooled: Var, attrs: &[usize]| -> Result<Var> {
        if attrs.is_empty() {
            g.stack_rows(&[pooled])
        } else {
            let rows = g.gather(emb.attrs, attrs)?;
            g.stack_rows(&[pooled, rows])
        }
    };
    let pos = side(g, pooled_pos, state.accepted_attrs())?;
    let neg = side(g, pooled_neg, state.rejected_attrs())?;
    Ok((pos, neg))
}

fn transformer_layer(g: &mut Graph, p: &Bound, l: usize, x: Var) -> Result<Var> {
    let w = |name: &str| p.var(&format!("enc.layer{l}.{name}"));
    let d = g.value(x).cols() as f64;
    let q = g.matmul_t(x, w("wq")?)?;
    let k = g.matmul_t(x, w("wk")?)?;
    let v = g.matmul_t(x, w("wv")?)?;
    let scores = g.matmul_t(q, k)?;
    let scores = g.affine(scores, 1.0 / d.sqrt(), 0.0)?;
    let attn = g.softmax_rows(scores)?;
    let h = g.matmul(attn, v)?;
    let o = g.matmul_t(h, w("wo")?)?;
    let x1 = g.add(x, o)?;
    let x1 = g.layer_norm_rows(x1)?;
    let f = g.matmul_t(x1, w("ff1.w")?)?;
    let f = g.add_row(f, w("ff1.b")?)?;
    let f = g.relu(f)?;
    let f = g.matmul_t(f, w("ff2.w")?)?;
    let f = g.add_row(f, w("ff2.b")?)?;
    let x2 = g.add(x1, f)?;
    g.layer_norm_rows(x2)
}

fn layer_count(p: &Bound) -> usize {
    (0..).take_while(|l| p.get(&format!("enc.layer{l}.wq")).is_some()).count()
}

/// Signed-embedding Transformer encoder with cross gates.
pub fn encode_state(g: &mut Graph, p: &Bound, emb: &EmbeddingVars, state: &DialogueState) -> Result<Encoded> {
    let (pos, neg) = raw_tokens(g, emb, state)?;
    let n_pos = g.value(pos).rows();
    let pos = g.add_row(pos, p.var("enc.sign_pos")?)?;
    let neg = g.add_row(neg, p.var("enc.sign_neg")?)?;
    let mut x = g.stack_rows(&[pos, neg])?;
    for l in 0..layer_count(p) {
        x = transformer_layer(g, p, l, x)?;
    }
    let n = g.value(x).rows();
    let pos_rows = g.gather(x, &(0..n_pos).collect::<Vec<_>>())?;
    let neg_rows = g.gather(x, &(n_pos..n).collect::<Vec<_>>())?;
    let s_pos = g.mean_rows(pos_rows)?;
    let s_neg = g.mean_rows(neg_rows)?;
    let g_pos = g.linear(p.var("enc.gate_pos.w")?, p.var("enc.gate_pos.b")?, s_pos)?;
    let g_pos = g.sigmoid(g_pos)?;
    let g_neg = g.linear(p.var("enc.gate_neg.w")?, p.var("enc.gate_neg.b")?, s_neg)?;
    let g_neg = g.sigmoid(g_neg)?;
    let gated_pos = g.mul(s_pos, g_neg)?;
    let gated_neg = g.mul(s_neg, g_pos)?;
    let s = g.sub(gated_pos, gated_neg)?;
    Ok(Encoded {
        s,
        s_pos,
        s_neg,
        g_pos: Some(g_pos),
        g_neg: Some(g_neg),
    })
}

/// Means of raw positive/negative embeddings through one linear layer.
pub fn linear_encode_state(g: &mut Graph, p: &Bound, emb: &EmbeddingVars, state: &DialogueState) -> Result<Encoded> {
    let (pos, neg) = raw_tokens(g, emb, state)?;
    let s_pos = g.mean_rows(pos)?;
    let s_neg = g.mean_rows(neg)?;
    let both = g.concat(&[s_pos, s_neg])?;
    let s = g.linear(p.var("enc.linear.w")?, p.var("enc.linear.b")?, both)?;
    Ok(Encoded {
        s,
        s_pos,
        s_neg,
        g_pos: None,
        g_neg: None,
    })
}

/// Dispatches on which parameters are present.
pub fn encode(g: &mut Graph, p: &Bound, emb: &EmbeddingVars, state: &DialogueState) -> Result<Encoded> {
    if p.get("enc.linear.w").is_some() {
        linear_encode_state(g, p, emb, state)
    } else {
        ensure!(
            p.get("enc.sign_pos").is_some(),
            Contract,
            "no encoder parameters bound"
        );
        encode_state(g, p, emb, state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::dialogue::{Action, Feedback};
    use crate::numerics::sigmoid;
    use crate::rng::stream;

    fn table(dim: usize, users: usize, items: usize, attrs: usize, seed: u64) -> EmbeddingTable {
        let mut rng = stream(seed, &[]);
        EmbeddingTable {
            users: normal(&mut rng, &[users, dim], 1.0),
            items: normal(&mut rng, &[items, dim], 1.0),
            attrs: normal(&mut rng, &[attrs, dim], 1.0),
        }
    }

    fn catalog() -> Catalog {
        Catalog::new(1, 5, vec![vec![0, 1], vec![1, 2], vec![0, 1, 3], vec![4]], vec![(0, 0)]).unwrap()
    }

    fn state_with(c: &Catalog, confirm: &[usize], dismiss: &[usize]) -> DialogueState {
        let mut s = DialogueState::new(c.n_items(), 10).unwrap();
        for &p in confirm {
            s = s.apply_feedback(c, &Action::Ask { attr: p }, Feedback::Confirm).unwrap();
        }
        for &p in dismiss {
            s = s.apply_feedback(c, &Action::Ask { attr: p }, Feedback::Dismiss).unwrap();
        }
        s
    }

    fn run(ps: &ParamSet, t: &EmbeddingTable, s: &DialogueState) -> Vec<f64> {
        let mut g = Graph::new();
        let b = g.bind(ps, false);
        let e = EmbeddingVars::bind(&mut g, t, false);
        let out = encode(&mut g, &b, &e, s).unwrap();
        g.value(out.s).data().to_vec()
    }

    #[test]
    fn zero_everything_gives_zero_state() {
        let mut ps = init_encoder(&EncoderConfig::default(), 4, &mut stream(0, &[]));
        ps.scale(0.0);
        let mut t = table(4, 1, 4, 5, 1);
        t.items.data_mut().iter_mut().for_each(|x| *x = 0.0);
        t.attrs.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let c = catalog();
        let s = state_with(&c, &[1], &[4]);
        let mut g = Graph::new();
        let b = g.bind(&ps, false);
        let e = EmbeddingVars::bind(&mut g, &t, false);
        let out = encode_state(&mut g, &b, &e, &s).unwrap();
        assert!(g.value(out.s).data().iter().all(|x| *x == 0.0));
        assert!(g.value(out.g_pos.unwrap()).data().iter().all(|x| *x == 0.5));
    }

    #[test]
    fn permutation_invariant_in_accepted_attrs() {
        let ps = init_encoder(&EncoderConfig::default(), 6, &mut stream(2, &[]));
        let c = catalog();
        let t = table(6, 1, 4, 5, 3);
        let a = run(&ps, &t, &state_with(&c, &[0, 1], &[2, 4]));
        let b = run(&ps, &t, &state_with(&c, &[1, 0], &[4, 2]));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_arithmetic_on_toy() {
        // L=0, one positive and one negative token, 4-dim.
        let cfg = EncoderConfig {
            layers: 0,
            ..EncoderConfig::default()
        };
        let ps = init_encoder(&cfg, 4, &mut stream(5, &[]));
        let t = table(4, 1, 1, 1, 6);
        let s = DialogueState::new(1, 10).unwrap();
        let got = run(&ps, &t, &s);
        let get = |n: &str| ps.get(n).unwrap().data().to_vec();
        let sp: Vec<f64> = t.item(0).iter().zip(get("enc.sign_pos")).map(|(a, b)| a + b).collect();
        let sn = get("enc.sign_neg");
        let gate = |w: Vec<f64>, b: Vec<f64>, x: &[f64]| -> Vec<f64> {
            (0..4)
                .map(|i| sigmoid((0..4).map(|j| w[i * 4 + j] * x[j]).sum::<f64>() + b[i]))
                .collect()
        };
        let gp = gate(get("enc.gate_pos.w"), get("enc.gate_pos.b"), &sp);
        let gn = gate(get("enc.gate_neg.w"), get("enc.gate_neg.b"), &sn);
        for i in 0..4 {
            let want = sp[i] * gn[i] - sn[i] * gp[i];
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_matches_identity_configured_transgate() {
        let dim = 4;
        let cfg = EncoderConfig {
            layers: 0,
            ..EncoderConfig::default()
        };
        let mut tg = init_encoder(&cfg, dim, &mut stream(7, &[]));
        tg.scale(0.0);
        let mut w = vec![0.0; dim * 2 * dim];
        for i in 0..dim {
            w[i * 2 * dim + i] = 0.5;
            w[i * 2 * dim + dim + i] = -0.5;
        }
        let mut lin = ParamSet::new();
        lin.insert("enc.linear.w", Tensor::matrix(dim, 2 * dim, w).unwrap());
        lin.insert("enc.linear.b", Tensor::zeros(&[dim]));
        let c = catalog();
        let t = table(dim, 1, 4, 5, 8);
        let s = state_with(&c, &[1], &[3, 4]);
        let a = run(&tg, &t, &s);
        let b = run(&lin, &t, &s);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut zero = lin.clone();
        zero.scale(0.0);
        assert!(run(&zero, &t, &s).iter().all(|x| *x == 0.0));
    }
}
