//! Executable checks of the numerical claims the controller relies on.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::Result;
use crate::experiment::{Experiment, MetricsRecord, Recorder, RunConfig, RunObserver, StepView};
use crate::grades::FreezeEvent;
use crate::linalg::{
    l1_elementwise, norm_frobenius, norm_spectral, norm_subordinate_inf, norm_subordinate_one,
    Matrix,
};
use crate::lora::LoraSet;
use crate::model::{
    backward_with, forward_with, loss_from, ComponentId, GradMode, ModelParams, ParamKey,
};
use crate::optim::OptimizerKind;
use crate::real::Real;
use crate::rng;
use crate::schedule::Schedule;
use crate::task::Example;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub samples: usize,
    /// Largest observed violation measure; must stay below `tolerance`.
    pub max_violation: f64,
    pub tolerance: f64,
    pub details: Vec<String>,
}

impl CheckReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: true,
            samples: 0,
            max_violation: 0.0,
            tolerance,
            details: Vec::new(),
        }
    }

    fn observe(&mut self, violation: f64) {
        self.samples += 1;
        if violation.is_nan() || violation > self.max_violation {
            self.max_violation = violation;
        }
    }

    fn settle(mut self) -> Self {
        self.passed =
            self.passed && self.max_violation <= self.tolerance && !self.max_violation.is_nan();
        self
    }
}

/// Samples `samples` random matrices with sides in `1..=max_dim` and
/// entries in `[−10, 10]`, and checks that the entry-wise L1 norm bounds
/// the spectral, Frobenius, infinity and one norms. The violation measure
/// is the absolute excess `max(other − L1, 0)`.
pub fn check_norm_theorem(
    samples: usize,
    max_dim: usize,
    seed: u64,
    tolerance: f64,
) -> Result<CheckReport> {
    use rand::Rng;
    if samples == 0 || max_dim == 0 {
        crate::bail!(InvalidInput, "need at least one sample of positive size");
    }
    let mut report = CheckReport::new("norm_theorem", tolerance);
    let mut r = rng::stream(seed, 0);
    for i in 0..samples {
        let rows = r.random_range(1..=max_dim);
        let cols = r.random_range(1..=max_dim);
        let m: Matrix<f64> = rng::uniform_matrix(&mut r, rows, cols, -10.0, 10.0);
        let l1 = l1_elementwise(&m)?;
        let others = [
            ("spectral", norm_spectral(&m)?),
            ("frobenius", norm_frobenius(&m)?),
            ("inf", norm_subordinate_inf(&m)?),
            ("one", norm_subordinate_one(&m)?),
        ];
        for (name, v) in others {
            let violation = (v - l1).max(0.0);
            if violation > tolerance {
                report.details.push(format!(
                    "sample {i} ({rows}x{cols}): {name} norm {v} exceeds L1 {l1}"
                ));
            }
            report.observe(violation);
        }
    }
    Ok(report.settle())
}

/// Input for a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckInput {
    pub params: ModelParams<f64>,
    pub adapters: Option<LoraSet<f64>>,
    pub example: Example,
    pub eps: f64,
    /// Entries with both gradients below this magnitude are compared on an
    /// absolute scale of `abs_floor`.
    pub abs_floor: f64,
}

/// Scales every weight by 5 and adds Normal(0, 0.3) noise; norm gains
/// become `1 + noise`. Moves the nonlinearities away from their linear
/// regime so every gradient entry is large enough for a finite difference
/// to resolve.
pub fn excite(params: &mut ModelParams<f64>, seed: u64) {
    let mut r = rng::stream(seed, 99);
    for key in params.keys() {
        let gain = matches!(
            key,
            ParamKey::FinalNorm | ParamKey::AttnNorm(_) | ParamKey::MlpNorm(_)
        );
        let t = params.tensor_mut(key).expect("listed key");
        for x in t.data_mut() {
            let noise = rng::normal(&mut r, 0.3);
            *x = if gain { 1.0 + noise } else { *x * 5.0 + noise };
        }
    }
}

/// Uniformly random tokens and targets, scored from `score_from`.
pub fn random_example(vocab_size: usize, len: usize, score_from: usize, seed: u64) -> Example {
    use rand::Rng;
    let mut r = rng::stream(seed, 7);
    let tokens = (0..len).map(|_| r.random_range(0..vocab_size)).collect();
    let targets = (0..len).map(|_| r.random_range(0..vocab_size)).collect();
    Example {
        tokens,
        targets,
        score_from,
    }
}

/// Relative error between analytic `a` and numeric `n`:
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares backprop gradients against central differences for every entry
/// of every trained matrix: all monitored weights in full mode, or every
/// adapter factor when adapters are given.
pub fn check_grad_fd(input: &GradCheckInput, tolerance: f64) -> Result<CheckReport> {
    let GradCheckInput {
        params,
        adapters,
        example: e,
        eps,
        abs_floor,
    } = input;
    let mode = if adapters.is_some() {
        GradMode::AdaptersOnly
    } else {
        GradMode::Full
    };
    let (_, cache) = forward_with(params, adapters.as_ref(), &e.tokens)?;
    let grads = backward_with(
        params,
        adapters.as_ref(),
        &cache,
        &e.targets,
        e.score_from,
        mode,
    )?;
    let loss_at = |p: &ModelParams<f64>, a: Option<&LoraSet<f64>>| -> Result<f64> {
        let (logits, _) = forward_with(p, a, &e.tokens)?;
        loss_from(&logits, &e.targets, e.score_from)
    };

    let mut report = CheckReport::new("grad_fd", tolerance);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let keys: Vec<ParamKey> = match adapters {
        Some(set) => set.keys(),
        None => params.config.components().map(ParamKey::Weight).collect(),
    };
    let mut p = params.clone();
    let mut a = adapters.clone();
    for key in keys {
        let analytic = match key {
            ParamKey::LoraA(id) => grads.adapter(id).map(|g| g.a.clone()),
            ParamKey::LoraB(id) => grads.adapter(id).map(|g| g.b.clone()),
            _ => grads.base.tensor(key).cloned(),
        }
        .ok_or_else(|| crate::Error::Contract(format!("no gradient for {key}")))?;
        for idx in 0..analytic.len() {
            let mut probe = |delta: f64| -> Result<f64> {
                let t = match a.as_mut() {
                    Some(set) => set.tensor_mut(key),
                    None => p.tensor_mut(key),
                }
                .expect("listed key");
                let orig = t.data()[idx];
                t.data_mut()[idx] = orig + delta;
                let l = loss_at(&p, a.as_ref());
                let t = match a.as_mut() {
                    Some(set) => set.tensor_mut(key),
                    None => p.tensor_mut(key),
                }
                .expect("listed key");
                t.data_mut()[idx] = orig;
                l
            };
            let numeric = (probe(*eps)? - probe(-*eps)?) / (2.0 * eps);
            let err = relative_error(analytic.data()[idx], numeric, *abs_floor);
            let w = worst.entry(key.to_string()).or_insert(0.0);
            *w = w.max(err);
            report.observe(err);
        }
    }
    for (k, v) in worst {
        report
            .details
            .push(format!("{k}: max relative error {v:.3e}"));
    }
    Ok(report.settle())
}

/// Runs `cfg` with full-batch gradients, a constant learning rate and SGD,
/// and checks that the training loss never rises by more than `slack`
/// between consecutive steps after `warmup` steps.
pub fn check_monotone_loss(cfg: &RunConfig, warmup: usize, slack: f64) -> Result<CheckReport> {
    let mut cfg = full_batch(cfg);
    cfg.early_stopping = None;
    let mut report = CheckReport::new("monotone_loss", slack);
    let mut rec = Recorder::default();
    let out = Experiment::<f64>::new(&cfg)?.run(&mut rec)?;
    if let Some(d) = &out.summary.diverged {
        report.passed = false;
        report.details.push(format!("run diverged: {d}"));
    }
    let losses: Vec<f64> = rec.steps.iter().map(|r| r.train_loss).collect();
    for (i, w) in losses.windows(2).enumerate() {
        let step = i + 1;
        if step < warmup {
            continue;
        }
        let rise = w[1] - w[0];
        if rise > slack {
            report.details.push(format!(
                "loss rose by {rise:.3e} from step {step} to {}",
                step + 1
            ));
        }
        report.observe(rise.max(0.0));
    }
    Ok(report.settle())
}

fn full_batch(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.batch_size = c.task.n_train;
    c.optimizer.kind = OptimizerKind::Sgd;
    c.optimizer.schedule = Schedule::Constant;
    c
}

/// Largest learning rate among `candidates` under which a full-batch SGD
/// run of `probe_steps` steps has a non-increasing loss.
pub fn bracket_stable_lr(
    cfg: &RunConfig,
    candidates: &[f64],
    probe_steps: usize,
    slack: f64,
) -> Result<Option<f64>> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for lr in sorted {
        let mut c = cfg.clone();
        c.optimizer.lr = lr;
        c.total_steps = probe_steps;
        if let Some(g) = c.grades.as_mut() {
            g.tau = 0.0;
        }
        let r = check_monotone_loss(&c, 1, slack)?;
        if r.passed {
            return Ok(Some(lr));
        }
    }
    Ok(None)
}

/// Every freeze event must carry a metric strictly below its threshold, and
/// that metric must match the step's telemetry. Frozen components whose
/// later raw gradient magnitude reaches the threshold are reported as
/// notes, not failures.
pub fn check_frozen_gradient_bound(log: &[FreezeEvent], records: &[MetricsRecord]) -> CheckReport {
    let mut report = CheckReport::new("frozen_gradient_bound", 0.0);
    let by_step: BTreeMap<usize, &MetricsRecord> = records.iter().map(|r| (r.step, r)).collect();
    for e in log {
        report.observe((e.metric - e.tau).max(0.0));
        if e.metric >= e.tau {
            report.passed = false;
            report.details.push(format!(
                "{} frozen at step {} with metric {} not below {}",
                e.component, e.step, e.metric, e.tau
            ));
        }
        match by_step
            .get(&e.step)
            .and_then(|r| r.metrics.iter().find(|(id, _)| *id == e.component))
        {
            Some(&(_, m)) if m == e.metric => {}
            _ => {
                report.passed = false;
                report.details.push(format!(
                    "telemetry for {} at step {} does not match",
                    e.component, e.step
                ));
            }
        }
    }
    let over: usize = records.iter().map(|r| r.frozen_over_tau.len()).sum();
    report.details.push(format!(
        "{over} frozen component-steps had a raw gradient magnitude at or above their threshold"
    ));
    report.settle()
}

/// Observer asserting that frozen matrices stay bit-identical while their
/// gradients keep flowing.
#[derive(Debug, Default)]
pub struct FrozenInvariance {
    snapshots: BTreeMap<ComponentId, Vec<u64>>,
    pub steps_checked: usize,
    pub frozen_nonzero_grads: usize,
    pub frozen_zero_grads: usize,
    pub mutations: Vec<String>,
}

fn bits<T: Real>(m: &Matrix<T>) -> Vec<u64> {
    m.data().iter().map(|x| x.bits()).collect()
}

impl<T: Real> RunObserver<T> for FrozenInvariance {
    fn on_step(&mut self, _record: &MetricsRecord, view: &StepView<'_, T>) -> Result<()> {
        for &id in view.frozen {
            let current = match view.adapters {
                Some(set) => {
                    let ad = set.get(id).expect("adapter for watched component");
                    let mut joined = bits(&ad.a);
                    joined.extend(bits(&ad.b));
                    joined
                }
                None => bits(view.params.monitored(id)),
            };
            match self.snapshots.get(&id) {
                Some(old) if *old != current => {
                    self.mutations
                        .push(format!("{id} changed at step {}", view.step));
                }
                Some(_) => {}
                None => {
                    self.snapshots.insert(id, current);
                }
            }
            let flowing = match view.adapters {
                Some(_) => view
                    .grads
                    .adapter(id)
                    .is_some_and(|g| g.a.data().iter().chain(g.b.data()).any(|x| *x != T::zero())),
                None => view
                    .grads
                    .monitored(id)
                    .data()
                    .iter()
                    .any(|x| *x != T::zero()),
            };
            if flowing {
                self.frozen_nonzero_grads += 1;
            } else {
                self.frozen_zero_grads += 1;
            }
        }
        self.steps_checked += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-8), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-8) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-12, 1e-8) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn small_norm_theorem_sample() {
        let r = check_norm_theorem(50, 5, 1, 1e-12).unwrap();
        assert!(r.passed, "{:?}", r.details);
        assert_eq!(r.samples, 200);
    }

    #[test]
    fn bound_check_flags_bad_events() {
        let id = ComponentId::from_index(0);
        let bad = FreezeEvent {
            step: 1,
            component: id,
            metric: 2.0,
            tau: 1.0,
        };
        let record = MetricsRecord {
            step: 1,
            train_loss: 0.0,
            lr: 0.1,
            metrics: alloc::vec![(id, 2.0)],
            newly_frozen: alloc::vec![id],
            frozen_count: 1,
            frozen_over_tau: Vec::new(),
            flops: Default::default(),
            wall_time_ms: None,
        };
        assert!(
            !check_frozen_gradient_bound(
                core::slice::from_ref(&bad),
                core::slice::from_ref(&record)
            )
            .passed
        );
        let good = FreezeEvent { metric: 0.5, ..bad };
        let record = MetricsRecord {
            metrics: alloc::vec![(id, 0.5)],
            ..record
        };
        assert!(check_frozen_gradient_bound(&[good], &[record]).passed);
    }
}
