//! Plain gradient descent and Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{ensure, Result};

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    params.add_scaled(grads, -lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Moment buffers and step counter for one parameter bundle.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub config: AdamConfig,
    first: Option<ParamSet>,
    second: Option<ParamSet>,
    step: u64,
}

impl OptimizerState {
    /// Adam state with moment buffers shaped like `params`.
    pub fn adam(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            config,
            first: Some(params.zeros_like()),
            second: Some(params.zeros_like()),
            step: 0,
        }
    }

    /// Adam state whose buffers have not been allocated; stepping it fails.
    pub fn uninitialized(config: AdamConfig) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            config,
            first: None,
            second: None,
            step: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            config: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            first: None,
            second: None,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                sgd_step(params, grads, self.config.lr)?;
                self.step += 1;
                Ok(())
            }
            OptimizerKind::Adam => adam_step(self, params, grads),
        }
    }
}

/// One Adam update: `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
pub fn adam_step(state: &mut OptimizerState, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
    let (Some(m), Some(v)) = (state.first.as_mut(), state.second.as_mut()) else {
        return Err(crate::Error::Contract("adam state not initialized".into()));
    };
    params.check_same_layout(grads)?;
    m.check_same_layout(params)?;
    ensure!(state.kind == OptimizerKind::Adam, Contract, "not an adam state");
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let layers = params
        .iter_mut()
        .zip(grads.iter())
        .zip(m.iter_mut())
        .zip(v.iter_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in layers {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![v]).unwrap());
        p
    }

    #[test]
    fn sgd_hand_step() {
        let mut p = single(1.0);
        sgd_step(&mut p, &single(2.0), 0.01).unwrap();
        assert!((p.tensor("x").unwrap().item() - 0.98).abs() < 1e-15);
        sgd_step(&mut p, &single(2.0), 0.0).unwrap();
        assert!((p.tensor("x").unwrap().item() - 0.98).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap());
        let before = p.clone();
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().data_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut st = OptimizerState::adam(AdamConfig::default(), &p);
        st.step(&mut p, &g).unwrap();
        for (a, b) in p.tensor("w").unwrap().data().iter().zip(before.tensor("w").unwrap().data()) {
            assert!((a - b + 0.005).abs() < 1e-7, "moved {}", a - b);
        }
    }

    #[test]
    fn adam_zero_grad_no_decay_is_identity() {
        let mut p = single(0.3);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::adam(cfg, &p);
        for _ in 0..5 {
            st.step(&mut p, &single(0.0)).unwrap();
        }
        assert_eq!(p.tensor("x").unwrap().item(), 0.3);
        assert_eq!(st.steps(), 5);
    }

    #[test]
    fn adam_uninitialized_is_error() {
        let mut p = single(0.3);
        let mut st = OptimizerState::uninitialized(AdamConfig::default());
        assert!(st.step(&mut p, &single(1.0)).is_err());
    }

    #[test]
    fn adam_solves_convex_quadratic() {
        // f(x) = ½ Σ a_i (x_i − c_i)², optimum x = c.
        let a = [1.0, 4.0, 0.5];
        let c = [1.0, -2.0, 0.25];
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![0.0; 3]).unwrap());
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::adam(cfg, &p);
        let grad = |p: &ParamSet| {
            let x = p.tensor("x").unwrap().data();
            let g: Vec<f64> = (0..3).map(|i| a[i] * (x[i] - c[i])).collect();
            let mut out = ParamSet::new();
            out.insert("x", Tensor::vector(g).unwrap());
            out
        };
        for _ in 0..200 {
            let g = grad(&p);
            st.step(&mut p, &g).unwrap();
        }
        let g = grad(&p);
        assert!(g.norm() < 1e-3, "grad norm {}", g.norm());
        for (x, ci) in p.tensor("x").unwrap().data().iter().zip(c) {
            assert!((x - ci).abs() < 1e-2);
        }
    }
}
