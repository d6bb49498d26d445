//! SGD and AdamW with per-tensor state.

use alloc::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::ParamKey;
use crate::real::Real;
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adamw(lr)
        }
    }

    pub fn adamw(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            crate::bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            crate::bail!(Config, "betas must lie in [0, 1)");
        }
        if self.eps.is_nan()
            || self.eps <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            crate::bail!(Config, "eps must be positive and weight_decay non-negative");
        }
        self.schedule.validate()
    }

    /// Nominal FLOPs spent per updated parameter entry.
    ///
    /// SGD: one multiply and one subtract. AdamW: two moment updates
    /// (3 + 4), two bias corrections, square root, add eps, divide, the
    /// decoupled decay term, the learning-rate scale and the subtract,
    /// counted as 16.
    pub fn flops_per_param(&self) -> u64 {
        match self.kind {
            OptimizerKind::Sgd => 2,
            OptimizerKind::AdamW => 16,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Matrix<T>,
    v: Matrix<T>,
    t: i32,
}

/// Optimizer state, keyed by parameter. A tensor that is skipped (frozen)
/// keeps its moments and step count untouched.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    state: BTreeMap<ParamKey, Moments<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// One update of `param` in place.
    ///
    /// SGD: `w ← w − lr·g`.
    /// AdamW: `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
    /// `w ← w − lr·(m̂ / (√v̂ + ε) + λw)` with bias-corrected `m̂, v̂`.
    pub fn update(
        &mut self,
        key: ParamKey,
        param: &mut Matrix<T>,
        grad: &Matrix<T>,
        lr: T,
    ) -> Result<()> {
        grad.ensure_shape(param.shape())?;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (w, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::AdamW => {
                let (rows, cols) = param.shape();
                let st = self.state.entry(key).or_insert_with(|| Moments {
                    m: Matrix::zeros(rows, cols),
                    v: Matrix::zeros(rows, cols),
                    t: 0,
                });
                st.t += 1;
                let b1 = T::lit(self.cfg.beta1);
                let b2 = T::lit(self.cfg.beta2);
                let one = T::one();
                let c1 = one - b1.powi_m(st.t);
                let c2 = one - b2.powi_m(st.t);
                let eps = T::lit(self.cfg.eps);
                let wd = T::lit(self.cfg.weight_decay);
                let w = param.data_mut();
                let m = st.m.data_mut();
                let v = st.v.data_mut();
                for i in 0..w.len() {
                    let g = grad.data()[i];
                    m[i] = b1 * m[i] + (one - b1) * g;
                    v[i] = b2 * v[i] + (one - b2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    w[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
                }
            }
        }
        Ok(())
    }
}
