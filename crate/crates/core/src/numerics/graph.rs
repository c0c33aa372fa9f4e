//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]; nodes are therefore stored
//! in topological order and the backward pass is a single reverse sweep.
//! A graph supports exactly one backward pass; call [`Graph::reset`] (or build
//! a fresh graph) before recording the next computation.

use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    SoftmaxRows(Var),
    LogSoftmax(Var),
    LayerNormRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameters of a [`ParamSet`] registered as graph leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Recorded computation plus gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes and gradients so the graph can record again.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::vector(data)?))
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every tensor of `params` as a leaf. `trainable` decides whether
    /// gradients are tracked for them.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), self.push_leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Collects gradients of the bound leaves into a [`ParamSet`] shaped like
    /// `params`; leaves without gradient contribute zeros.
    pub fn collect_grads(&self, bound: &Bound, params: &ParamSet) -> Result<ParamSet> {
        let mut out = params.zeros_like();
        for (name, var) in bound.iter() {
            if let Some(g) = self.grad(*var) {
                let slot = out
                    .get_mut(name)
                    .ok_or_else(|| Error::Contract(format!("parameter {name} missing")))?;
                slot.data_mut().copy_from_slice(g);
            }
        }
        Ok(out)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::MatVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmax(a)
            | Op::LayerNormRows(a, _)
            | Op::Gather(a, _)
            | Op::MeanRows(a)
            | Op::Slice(a, _)
            | Op::Sum(a)
            | Op::Pick(a, _) => vec![*a],
            Op::Concat(vs) | Op::StackRows(vs) => vs.clone(),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn vector_len(&self, v: Var, what: &str) -> Result<usize> {
        match *self.shape(v) {
            [n] => Ok(n),
            ref s => Err(Error::Dimension(format!("{what} expects a vector, got {s:?}"))),
        }
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        ensure!(k == k2, Dimension, "matmul inner dims {k} vs {k2}");
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a [m×k] · bᵀ` with `b [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        ensure!(k == k2, Dimension, "matmul_t inner dims {k} vs {k2}");
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot_raw(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), "matmul_t")
    }

    /// `w [m×k] · x [k]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(w, "matvec")?;
        let n = self.vector_len(x, "matvec")?;
        ensure!(k == n, Dimension, "matvec {m}x{k} by vector of {n}");
        let (wd, xd) = (self.data(w), self.data(x));
        let out: Vec<f64> = (0..m).map(|i| dot_raw(&wd[i * k..(i + 1) * k], xd)).collect();
        self.push(Tensor::vector(out)?, Op::MatVec(w, x), "matvec")
    }

    /// `w·x + b`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let h = self.matvec(w, x)?;
        self.add(h, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let ad = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "{what}: shapes {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, name)?;
        let len = self.vector_len(row, name)?;
        ensure!(len == n, Dimension, "{name}: row of {len} against {m}x{n}");
        let (ad, rd) = (self.data(a), self.data(row));
        let out: Vec<f64> = ad.iter().enumerate().map(|(i, x)| f(*x, rd[i % n])).collect();
        self.push(Tensor::new(vec![m, n], out)?, op, name)
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::AddRow(a, row), "add_row", |x, y| x + y)
    }

    /// Multiplies every row of a matrix elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::MulRow(a, row), "mul_row", |x, y| x * y)
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| scale * x + shift).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Affine(a, scale), "affine")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, op, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.vector_len(a, "softmax")?;
        let out = softmax_raw(self.data(a));
        self.push(Tensor::vector(out)?, Op::Softmax(a), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.vector_len(a, "log_softmax")?;
        let out = log_softmax_raw(self.data(a));
        self.push(Tensor::vector(out)?, Op::LogSoftmax(a), "log_softmax")
    }

    /// Softmax applied independently to every row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "softmax_rows")?;
        let ad = self.data(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(softmax_raw(&ad[i * n..(i + 1) * n]));
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "layer_norm_rows")?;
        let ad = self.data(a);
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * is));
            inv_std.push(is);
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNormRows(a, inv_std),
            "layer_norm_rows",
        )
    }

    /// Copies the selected rows of a matrix (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "gather")?;
        ensure!(!ids.is_empty(), Dimension, "gather with no ids");
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        self.push(
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::Gather(table, ids.to_vec()),
            "gather",
        )
    }

    /// Mean over rows: `[m×n] → [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "mean_rows")?;
        let ad = self.data(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&ad[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::vector(out)?, Op::MeanRows(a), "mean_rows")
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Dimension, "concat of nothing");
        let mut out = Vec::new();
        for &p in parts {
            self.vector_len(p, "concat")?;
            out.extend_from_slice(self.data(p));
        }
        self.push(Tensor::vector(out)?, Op::Concat(parts.to_vec()), "concat")
    }

    /// Stacks vectors (one row each) and matrices (all their rows) of equal
    /// width into one matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        ensure!(!rows.is_empty(), Dimension, "stack of nothing");
        let width = |g: &Self, v: Var| -> Result<(usize, usize)> {
            match *g.shape(v) {
                [n] => Ok((1, n)),
                [r, c] => Ok((r, c)),
                ref s => Err(Error::Dimension(format!("stack_rows of shape {s:?}"))),
            }
        };
        let (_, n) = width(self, rows[0])?;
        let mut total = 0;
        let mut out = Vec::new();
        for &r in rows {
            let (m, c) = width(self, r)?;
            ensure!(c == n, Dimension, "stack_rows: widths {n} vs {c}");
            total += m;
            out.extend_from_slice(self.data(r));
        }
        self.push(
            Tensor::new(vec![total, n], out)?,
            Op::StackRows(rows.to_vec()),
            "stack_rows",
        )
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.vector_len(a, "slice")?;
        ensure!(len > 0 && start + len <= n, Index, "slice {start}+{len} of {n}");
        let out = self.data(a)[start..start + len].to_vec();
        self.push(Tensor::vector(out)?, Op::Slice(a, start), "slice")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.vector_len(a, "dot")?;
        self.same_shape(a, b, "dot")?;
        let s = dot_raw(self.data(a), self.data(b));
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    /// Element `i` of a vector as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.vector_len(a, "pick")?;
        ensure!(i < n, Index, "pick {i} of {n}");
        let v = self.data(a)[i];
        self.push(Tensor::scalar(v), Op::Pick(a, i), "pick")
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        ensure!(!terms.is_empty(), Dimension, "sum of no terms");
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`. Allowed once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(!self.nodes.is_empty(), Contract, "backward on an empty graph");
        ensure!(
            !self.backward_done,
            Contract,
            "backward already ran on this graph; reset before recording again"
        );
        ensure!(loss.0 < self.nodes.len(), Index, "unknown loss node");
        ensure!(
            self.nodes[loss.0].value.is_scalar(),
            Contract,
            "loss must be scalar, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        // Accumulates `delta` into the gradient slot of `v`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if wants(a) {
                    acc(*a, &mut |s| {
                        for i in 0..m {
                            for p in 0..k {
                                s[i * k + p] += dot_raw(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
                if wants(b) {
                    acc(*b, &mut |s| {
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av != 0.0 {
                                    axpy(av, &g[i * n..(i + 1) * n], &mut s[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    });
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if wants(a) {
                    acc(*a, &mut |s| {
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g[i * n + j];
                                if gv != 0.0 {
                                    axpy(gv, &bd[j * k..(j + 1) * k], &mut s[i * k..(i + 1) * k]);
                                }
                            }
                        }
                    });
                }
                if wants(b) {
                    acc(*b, &mut |s| {
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g[i * n + j];
                                if gv != 0.0 {
                                    axpy(gv, &ad[i * k..(i + 1) * k], &mut s[j * k..(j + 1) * k]);
                                }
                            }
                        }
                    });
                }
            }
            Op::MatVec(w, x) => {
                let (m, k) = (self.shape(*w)[0], self.shape(*w)[1]);
                let (wd, xd) = (self.data(*w), self.data(*x));
                if wants(w) {
                    acc(*w, &mut |s| {
                        for i in 0..m {
                            if g[i] != 0.0 {
                                axpy(g[i], xd, &mut s[i * k..(i + 1) * k]);
                            }
                        }
                    });
                }
                if wants(x) {
                    acc(*x, &mut |s| {
                        for i in 0..m {
                            if g[i] != 0.0 {
                                axpy(g[i], &wd[i * k..(i + 1) * k], s);
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| axpy(1.0, g, s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| axpy(-1.0, g, s));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(bd).for_each(|((s, g), b)| *s += g * b));
                acc(*b, &mut |s| s.iter_mut().zip(g).zip(ad).for_each(|((s, g), a)| *s += g * a));
            }
            Op::AddRow(a, r) => {
                let n = self.shape(*r)[0];
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*r, &mut |s| {
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, s);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let n = self.shape(*r)[0];
                let (ad, rd) = (self.data(*a), self.data(*r));
                acc(*a, &mut |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += g[i] * rd[i % n];
                    }
                });
                acc(*r, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi * ad[i];
                    }
                });
            }
            Op::Affine(a, scale) => acc(*a, &mut |s| axpy(*scale, g, s)),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Relu(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if ad[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Log(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / ad[i];
                    }
                });
            }
            Op::Softmax(a) => acc(*a, &mut |s| softmax_backward(out, g, s)),
            Op::SoftmaxRows(a) => {
                let n = self.shape(*a)[1];
                acc(*a, &mut |s| {
                    for ((o, gr), sr) in out.chunks(n).zip(g.chunks(n)).zip(s.chunks_mut(n)) {
                        softmax_backward(o, gr, sr);
                    }
                });
            }
            Op::LogSoftmax(a) => acc(*a, &mut |s| {
                let total: f64 = g.iter().sum();
                for i in 0..s.len() {
                    s[i] += g[i] - out[i].exp() * total;
                }
            }),
            Op::LayerNormRows(a, inv_std) => {
                let n = self.shape(*a)[1];
                acc(*a, &mut |s| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = dot_raw(gr, y) / n as f64;
                        for j in 0..n {
                            s[r * n + j] += is * (gr[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                });
            }
            Op::Gather(t, ids) => {
                let cols = self.shape(*t)[1];
                acc(*t, &mut |s| {
                    for (row, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[row * cols..(row + 1) * cols], &mut s[id * cols..(id + 1) * cols]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let m = self.shape(*a)[0];
                let inv = 1.0 / m as f64;
                acc(*a, &mut |s| {
                    for chunk in s.chunks_mut(g.len()) {
                        axpy(inv, g, chunk);
                    }
                });
            }
            Op::Concat(parts) | Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(*p, &mut |s| axpy(1.0, &g[offset..offset + n], s));
                    offset += n;
                }
            }
            Op::Slice(a, start) => acc(*a, &mut |s| axpy(1.0, g, &mut s[*start..*start + g.len()])),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Dot(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| axpy(g[0], bd, s));
                acc(*b, &mut |s| axpy(g[0], ad, s));
            }
            Op::Pick(a, i) => acc(*a, &mut |s| s[*i] += g[0]),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}

/// Max-subtracted softmax of a slice.
pub fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn softmax_backward(y: &[f64], g: &[f64], s: &mut [f64]) {
    let inner = dot_raw(y, g);
    for i in 0..s.len() {
        s[i] += y[i] * (g[i] - inner);
    }
}
