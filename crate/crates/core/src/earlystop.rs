//! Validation-loss early stopping with patience.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flops::{forward_flops, AdapterLayout, CostLedger};
use crate::grades::ceil_fraction;
use crate::lora::LoraSet;
use crate::model::{forward_with, loss_from, ModelParams};
use crate::real::Real;
use crate::task::Example;

fn d_interval() -> f64 {
    0.05
}
fn d_patience() -> usize {
    3
}
fn d_delta() -> f64 {
    0.0005
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    /// Validation runs every `⌈interval_fraction · T⌉` steps.
    #[serde(default = "d_interval")]
    pub interval_fraction: f64,
    /// Checks without improvement tolerated before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    /// Required decrease below the best loss to count as an improvement.
    #[serde(default = "d_delta")]
    pub min_delta: f64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            interval_fraction: d_interval(),
            patience: d_patience(),
            min_delta: d_delta(),
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval_fraction > 0.0 && self.interval_fraction <= 1.0) {
            crate::bail!(Config, "interval_fraction must lie in (0, 1]");
        }
        if self.patience == 0 {
            crate::bail!(Config, "patience must be at least 1");
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            crate::bail!(Config, "min_delta must be a non-negative number");
        }
        Ok(())
    }

    pub fn interval(&self, total_steps: usize) -> usize {
        ceil_fraction(self.interval_fraction, total_steps).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsDecision {
    Continue,
    Stop,
}

/// Outcome of one validation check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsCheck {
    pub decision: EsDecision,
    pub improved: bool,
    pub best_val_loss: f64,
    pub checks_since_improvement: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsState {
    pub best_val_loss: f64,
    pub best_step: Option<usize>,
    pub checks_since_improvement: usize,
    pub history: Vec<(usize, f64)>,
}

impl Default for EsState {
    fn default() -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            best_step: None,
            checks_since_improvement: 0,
            history: Vec::new(),
        }
    }
}

impl EsState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `val_loss` at `step`. An improvement needs
    /// `val_loss < best − min_delta`; otherwise the counter grows and the
    /// run stops once it reaches `patience`.
    pub fn check(&mut self, step: usize, val_loss: f64, cfg: &EsConfig) -> Result<EsCheck> {
        if !val_loss.is_finite() {
            crate::bail!(Numerical, "validation loss is not finite at step {step}");
        }
        if self.history.last().is_some_and(|&(s, _)| s >= step) {
            crate::bail!(Contract, "validation checks must have increasing steps");
        }
        self.history.push((step, val_loss));
        let improved = val_loss < self.best_val_loss - cfg.min_delta;
        if improved {
            self.best_val_loss = val_loss;
            self.best_step = Some(step);
            self.checks_since_improvement = 0;
        } else {
            self.checks_since_improvement += 1;
        }
        let decision = if self.checks_since_improvement >= cfg.patience {
            EsDecision::Stop
        } else {
            EsDecision::Continue
        };
        Ok(EsCheck {
            decision,
            improved,
            best_val_loss: self.best_val_loss,
            checks_since_improvement: self.checks_since_improvement,
        })
    }
}

/// Free-function form of [`EsState::check`].
pub fn es_check(
    state: &mut EsState,
    step: usize,
    val_loss: f64,
    cfg: &EsConfig,
) -> Result<EsCheck> {
    state.check(step, val_loss, cfg)
}

/// Mean scored loss over `examples` without charging anything.
pub fn mean_loss<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&LoraSet<T>>,
    examples: &[Example],
) -> Result<f64> {
    if examples.is_empty() {
        crate::bail!(InvalidInput, "cannot evaluate an empty example set");
    }
    let mut total = 0.0;
    for e in examples {
        let (logits, _) = forward_with(params, adapters, &e.tokens)?;
        total += loss_from(&logits, &e.targets, e.score_from)?.as_f64();
    }
    Ok(total / examples.len() as f64)
}

/// Mean validation loss; forward FLOPs are charged to the ledger's
/// validation bucket.
pub fn validation_loss<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&LoraSet<T>>,
    val: &[Example],
    ledger: &mut CostLedger,
) -> Result<f64> {
    let layout = adapters.and_then(|set| {
        let first = set.adapters().iter().flatten().next()?;
        let roles: Vec<_> = set.components().iter().map(|c| c.role).collect();
        Some(AdapterLayout::new(first.rank, &roles))
    });
    let loss = mean_loss(params, adapters, val)?;
    for e in val {
        ledger.charge_val(forward_flops(
            &params.config,
            e.tokens.len(),
            layout.as_ref(),
        )?)?;
    }
    Ok(loss)
}
