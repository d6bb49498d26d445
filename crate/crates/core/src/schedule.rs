//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grades::ceil_fraction;

fn default_warmup() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warmup over `⌈warmup_fraction · T⌉` steps, then cosine decay
    /// to `min_lr` at step `T`.
    CosineWarmup {
        #[serde(default = "default_warmup")]
        warmup_fraction: f64,
        #[serde(default)]
        min_lr: f64,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if let Schedule::CosineWarmup {
            warmup_fraction,
            min_lr,
        } = *self
        {
            if !(0.0..=1.0).contains(&warmup_fraction) {
                crate::bail!(Config, "warmup_fraction must lie in [0, 1]");
            }
            if !(min_lr >= 0.0 && min_lr.is_finite()) {
                crate::bail!(Config, "min_lr must be a non-negative number");
            }
        }
        Ok(())
    }

    /// Learning rate for 1-based `step` of `total_steps`.
    pub fn lr_at(&self, base_lr: f64, step: usize, total_steps: usize) -> f64 {
        match *self {
            Schedule::Constant => base_lr,
            Schedule::CosineWarmup {
                warmup_fraction,
                min_lr,
            } => {
                let warmup = ceil_fraction(warmup_fraction, total_steps);
                if step <= warmup {
                    return base_lr * step as f64 / warmup as f64;
                }
                let span = (total_steps - warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
                min_lr + (base_lr - min_lr) * cos
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_flat() {
        assert_eq!(Schedule::Constant.lr_at(0.1, 1, 10), 0.1);
        assert_eq!(Schedule::Constant.lr_at(0.1, 10, 10), 0.1);
    }

    #[test]
    fn cosine_warmup_shape() {
        let s = Schedule::CosineWarmup {
            warmup_fraction: 0.1,
            min_lr: 0.0,
        };
        assert!((s.lr_at(1.0, 5, 100) - 0.5).abs() < 1e-12);
        assert!((s.lr_at(1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(1.0, 55, 100) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(1.0, 100, 100).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for t in 10..=100 {
            let lr = s.lr_at(1.0, t, 100);
            assert!(lr <= last);
            last = lr;
        }
    }
}
