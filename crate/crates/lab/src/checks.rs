//! The `verify` command: numerical self-checks run in `f64`.

use anyhow::{bail, Result};
use grades_core::experiment::{
    tau_bracket, Experiment, Method, Recorder, RunConfig, RunObserver, StepView, SCHEMA_VERSION,
};
use grades_core::experiment::{MetricsRecord, ValCheck};
use grades_core::grades::{FreezeEvent, GradEsParams};
use grades_core::lora::LoraSet;
use grades_core::model::{ModelConfig, ModelParams, Role};
use grades_core::optim::OptimizerConfig;
use grades_core::task::{TaskKind, TaskSpec};
use grades_core::verify::{
    bracket_stable_lr, check_frozen_gradient_bound, check_grad_fd, check_monotone_loss,
    check_norm_theorem, excite, random_example, CheckReport, FrozenInvariance, GradCheckInput,
};

/// Candidate learning rates for the monotone-loss check, largest first.
pub const LR_CANDIDATES: [f64; 8] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5];

/// A small Copy-task GradES run that finishes in well under a second.
pub fn builtin_config() -> RunConfig {
    RunConfig {
        schema_version: SCHEMA_VERSION,
        name: Some("verify".into()),
        seed: 7,
        method: Method::FpGradEs,
        total_steps: 300,
        batch_size: 4,
        model: ModelConfig {
            vocab_size: 8,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_seq_len: 8,
            seed: 7,
        },
        task: TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 8,
            seq_len: 3,
            n_train: 32,
            n_val: 16,
            seed: 7,
        },
        optimizer: OptimizerConfig::adamw(3e-3),
        grades: Some(zero_tau()),
        early_stopping: None,
        lora: None,
        pretrain: None,
        record_wall_time: false,
    }
}

fn zero_tau() -> GradEsParams {
    GradEsParams {
        alpha: 0.5,
        tau: 0.0,
        metric_mode: None,
        normalize_by_size: false,
        tau_overrides: Vec::new(),
    }
}

fn fd_model(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_seq_len: 10,
        seed,
    }
}

/// Finite-difference checks of the full model and of adapters.
pub fn grad_checks(
    seeds: std::ops::RangeInclusive<u64>,
    tolerance: f64,
) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut params = ModelParams::<f64>::init(&fd_model(seed))?;
        excite(&mut params, seed);
        let mut adapters = LoraSet::<f64>::new(&fd_model(seed), 2, 1.0, &Role::ALL, seed)?;
        adapters.randomize_b(seed, 0.5);
        for adapters in [None, Some(adapters)] {
            let lora = adapters.is_some();
            let input = GradCheckInput {
                params: params.clone(),
                adapters,
                example: random_example(11, 7, 2, seed),
                eps: 1e-5,
                abs_floor: f64::MIN_POSITIVE,
            };
            let mut r = check_grad_fd(&input, tolerance)?;
            r.name = format!("{}{}[seed={seed}]", r.name, if lora { "_lora" } else { "" });
            out.push(r);
        }
    }
    Ok(out)
}

/// Brackets the largest candidate learning rate whose full-batch loss never
/// rises over the whole horizon, then reruns at half that rate and checks
/// the loss never rises over `steps` steps after `warmup`. Short probes are
/// not enough: a rate can descend for a hundred steps and start
/// oscillating once the loss sharpens.
pub fn monotone_check(
    cfg: &RunConfig,
    warmup: usize,
    steps: usize,
    slack: f64,
) -> Result<CheckReport> {
    let mut base = cfg.with_method(Method::Fp);
    base.early_stopping = None;
    let Some(bound) = bracket_stable_lr(&base, &LR_CANDIDATES, warmup + steps, slack)? else {
        bail!("no candidate learning rate gave a non-increasing probe loss");
    };
    let lr = bound / 2.0;
    base.optimizer.lr = lr;
    base.total_steps = warmup + steps;
    let mut r = check_monotone_loss(&base, warmup, slack)?;
    r.details.insert(
        0,
        format!("lr {lr} (half the bracketed bound {bound}), {steps} steps after {warmup}"),
    );
    Ok(r)
}

/// Observer that feeds both the bound and the invariance check.
#[derive(Default)]
struct Both {
    rec: Recorder,
    inv: FrozenInvariance,
}

impl RunObserver<f64> for Both {
    fn on_step(&mut self, r: &MetricsRecord, v: &StepView<'_, f64>) -> grades_core::Result<()> {
        RunObserver::<f64>::on_step(&mut self.rec, r, v)?;
        self.inv.on_step(r, v)
    }
    fn on_freeze(&mut self, e: &FreezeEvent) -> grades_core::Result<()> {
        RunObserver::<f64>::on_freeze(&mut self.rec, e)
    }
    fn on_val_check(&mut self, c: &ValCheck) -> grades_core::Result<()> {
        RunObserver::<f64>::on_val_check(&mut self.rec, c)
    }
}

/// Runs `cfg` (a GradES method) with τ bracketed to freeze half the
/// components and checks every freeze decision and frozen matrix.
pub fn frozen_checks(cfg: &RunConfig) -> Result<Vec<CheckReport>> {
    let mut cfg = cfg.clone();
    if !cfg.method.uses_grades() {
        cfg.method = if cfg.method.is_lora() {
            Method::LoraGradEs
        } else {
            Method::FpGradEs
        };
    }
    cfg.grades.get_or_insert_with(zero_tau);
    let tau = tau_bracket::<f64>(&cfg, 0.5, 1)?.tau;
    match cfg.lora.as_mut().filter(|_| cfg.method.is_lora()) {
        Some(l) => l.tau_r = Some(tau),
        None => cfg.grades.as_mut().expect("set above").tau = tau,
    }
    let mut obs = Both::default();
    let out = Experiment::<f64>::new(&cfg)?.run(&mut obs)?;
    let mut bound = check_frozen_gradient_bound(&out.freeze_log, &obs.rec.steps);
    bound.details.insert(
        0,
        format!("tau {tau:.6e}, {} freezes", out.freeze_log.len()),
    );

    let inv = &obs.inv;
    let mut invariance = CheckReport {
        name: "frozen_invariance".into(),
        passed: inv.mutations.is_empty() && !out.freeze_log.is_empty(),
        samples: inv.frozen_nonzero_grads + inv.frozen_zero_grads,
        max_violation: inv.mutations.len() as f64,
        tolerance: 0.0,
        details: vec![format!(
            "{} frozen component-steps with nonzero gradients, {} with zero gradients",
            inv.frozen_nonzero_grads, inv.frozen_zero_grads
        )],
    };
    if out.freeze_log.is_empty() {
        invariance
            .details
            .push("nothing froze, so nothing was checked".into());
    }
    invariance.details.extend(inv.mutations.iter().cloned());
    Ok(vec![bound, invariance])
}

/// Every self-check. `cfg` replaces the built-in run for the training-based
/// checks.
pub fn verify_all(cfg: Option<&RunConfig>) -> Result<Vec<CheckReport>> {
    let builtin = builtin_config();
    let cfg = cfg.unwrap_or(&builtin);
    let mut reports = vec![check_norm_theorem(1000, 16, 99, 1e-8)?];
    reports.extend(grad_checks(1..=5, 1e-4)?);
    reports.push(monotone_check(cfg, 50, 500, 1e-9)?);
    reports.extend(frozen_checks(cfg)?);
    Ok(reports)
}
