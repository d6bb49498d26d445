//! Run configuration, the training loop, run comparison and threshold
//! probing.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::earlystop::{mean_loss, validation_loss, EsConfig, EsDecision, EsState};
use crate::error::{Error, Result};
use crate::flops::{AdapterLayout, CostLedger, CostModel, TrainMode};
use crate::grades::{
    apply_adapter_updates, apply_updates, ceil_fraction, FreezeEvent, GradEsConfig, GradEsParams,
    GradEsState, MetricMode,
};
use crate::lora::{LoraConfig, LoraSet};
use crate::model::{
    backward_with, forward_with, loss_from, ComponentId, GradMode, GradientBundle, ModelConfig,
    ModelParams,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::real::Real;
use crate::task::{gen_dataset, Dataset, Example, TaskSpec};

/// Current version of the configuration and telemetry schemas.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FP")]
    Fp,
    #[serde(rename = "FP_GradES")]
    FpGradEs,
    #[serde(rename = "FP_ES")]
    FpEs,
    #[serde(rename = "LoRA")]
    Lora,
    #[serde(rename = "LoRA_GradES")]
    LoraGradEs,
    #[serde(rename = "LoRA_ES")]
    LoraEs,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fp,
        Method::FpGradEs,
        Method::FpEs,
        Method::Lora,
        Method::LoraGradEs,
        Method::LoraEs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fp => "FP",
            Method::FpGradEs => "FP_GradES",
            Method::FpEs => "FP_ES",
            Method::Lora => "LoRA",
            Method::LoraGradEs => "LoRA_GradES",
            Method::LoraEs => "LoRA_ES",
        }
    }

    pub fn is_lora(self) -> bool {
        matches!(self, Method::Lora | Method::LoraGradEs | Method::LoraEs)
    }

    pub fn uses_grades(self) -> bool {
        matches!(self, Method::FpGradEs | Method::LoraGradEs)
    }

    pub fn uses_es(self) -> bool {
        matches!(self, Method::FpEs | Method::LoraEs)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

fn one() -> usize {
    1
}

fn schema() -> u32 {
    SCHEMA_VERSION
}

/// Plain full-parameter training applied before the run proper. Its cost
/// is not charged to the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Defaults to the run's task.
    #[serde(default)]
    pub task: Option<TaskSpec>,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "one")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub method: Method,
    pub total_steps: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub grades: Option<GradEsParams>,
    #[serde(default)]
    pub early_stopping: Option<EsConfig>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// Put wall-clock times into per-step telemetry. Off by default so that
    /// reruns produce identical files.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            crate::bail!(Config, "unsupported schema_version {}", self.schema_version);
        }
        self.model.validate()?;
        self.task.validate()?;
        self.optimizer.validate()?;
        if self.total_steps == 0 || self.batch_size == 0 {
            crate::bail!(Config, "total_steps and batch_size must be positive");
        }
        if self.task.vocab_size != self.model.vocab_size {
            crate::bail!(
                Config,
                "task vocabulary {} differs from model vocabulary {}",
                self.task.vocab_size,
                self.model.vocab_size
            );
        }
        if self.task.model_len() > self.model.max_seq_len {
            crate::bail!(
                Config,
                "task sequences have {} tokens but max_seq_len is {}",
                self.task.model_len(),
                self.model.max_seq_len
            );
        }
        if self.method.uses_grades() {
            match &self.grades {
                Some(_) => self.grades_config().expect("present").validate()?,
                None => crate::bail!(Config, "{} needs a [grades] section", self.method),
            }
        }
        if self.method.is_lora() && self.lora.is_none() {
            crate::bail!(Config, "{} needs a [lora] section", self.method);
        }
        if self.method.uses_es() {
            self.es_config().validate()?;
            if self.task.n_val == 0 {
                crate::bail!(Config, "{} needs a validation set", self.method);
            }
        }
        if let Some(p) = &self.pretrain {
            p.optimizer.validate()?;
            if let Some(t) = &p.task {
                t.validate()?;
                if t.vocab_size != self.model.vocab_size || t.model_len() > self.model.max_seq_len {
                    crate::bail!(Config, "pretraining task does not fit the model");
                }
            }
        }
        Ok(())
    }

    /// The same run with a different method.
    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    /// The same run with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.model.seed = seed;
        c.task.seed = seed;
        c
    }

    /// Effective controller settings for GradES methods. Adapter runs use
    /// `lora.tau_r` when set and default to the gradient-norm metric.
    pub fn grades_config(&self) -> Option<GradEsConfig> {
        let p = self.grades.as_ref()?;
        let lora = self.method.is_lora();
        let default_mode = if lora {
            MetricMode::GradNorm
        } else {
            MetricMode::GradDiff
        };
        let mut cfg = GradEsConfig::from_params(p, self.total_steps, default_mode);
        if lora {
            if let Some(t) = self.lora.as_ref().and_then(|l| l.tau_r) {
                cfg.tau = t;
            }
        }
        Some(cfg)
    }

    pub fn es_config(&self) -> EsConfig {
        self.early_stopping.unwrap_or_default()
    }

    fn train_mode(&self) -> TrainMode {
        match (&self.lora, self.method.is_lora()) {
            (Some(l), true) => TrainMode::Lora(AdapterLayout::from_config(l)),
            _ => TrainMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    AllFrozen,
    EarlyStopped,
    Diverged,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Completed => "completed",
            StopReason::AllFrozen => "all_frozen",
            StopReason::EarlyStopped => "early_stopped",
            StopReason::Diverged => "diverged",
        }
    }
}

/// Cumulative FLOPs after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopTotals {
    pub forward: u64,
    pub backward: u64,
    pub update: u64,
    pub val: u64,
}

impl FlopTotals {
    fn of(l: &CostLedger) -> Self {
        Self {
            forward: l.forward_flops,
            backward: l.backward_flops,
            update: l.update_flops,
            val: l.val_flops,
        }
    }
}

/// Telemetry of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean scored loss of the batch, before the update.
    pub train_loss: f64,
    pub lr: f64,
    /// Metric of every component still trainable when measured.
    pub metrics: Vec<(ComponentId, f64)>,
    pub newly_frozen: Vec<ComponentId>,
    pub frozen_count: usize,
    /// Frozen components whose raw gradient magnitude at this step is at or
    /// above their threshold.
    pub frozen_over_tau: Vec<ComponentId>,
    pub flops: FlopTotals,
    pub wall_time_ms: Option<f64>,
}

/// Outcome of one validation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValCheck {
    pub step: usize,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub improved: bool,
    pub checks_since_improvement: usize,
    pub stop: bool,
}

/// State visible to observers after a step's update.
pub struct StepView<'a, T> {
    pub step: usize,
    pub params: &'a ModelParams<T>,
    pub adapters: Option<&'a LoraSet<T>>,
    pub grads: &'a GradientBundle<T>,
    pub frozen: &'a BTreeSet<ComponentId>,
}

/// Receives telemetry while a run progresses.
pub trait RunObserver<T> {
    fn on_step(&mut self, _record: &MetricsRecord, _view: &StepView<'_, T>) -> Result<()> {
        Ok(())
    }
    fn on_freeze(&mut self, _event: &FreezeEvent) -> Result<()> {
        Ok(())
    }
    fn on_val_check(&mut self, _check: &ValCheck) -> Result<()> {
        Ok(())
    }
}

impl<T> RunObserver<T> for () {}

/// Collects records and checks in memory.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    pub steps: Vec<MetricsRecord>,
    pub freezes: Vec<FreezeEvent>,
    pub val_checks: Vec<ValCheck>,
}

impl<T> RunObserver<T> for Recorder {
    fn on_step(&mut self, record: &MetricsRecord, _view: &StepView<'_, T>) -> Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }
    fn on_freeze(&mut self, event: &FreezeEvent) -> Result<()> {
        self.freezes.push(event.clone());
        Ok(())
    }
    fn on_val_check(&mut self, check: &ValCheck) -> Result<()> {
        self.val_checks.push(*check);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub method: Method,
    pub precision: String,
    pub seed: u64,
    pub total_steps: usize,
    pub steps_executed: usize,
    pub stop_reason: StopReason,
    pub diverged: Option<String>,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub update_flops: u64,
    pub val_flops: u64,
    pub train_flops: u64,
    pub total_flops: u64,
    pub n_components: usize,
    pub frozen_count: usize,
    pub first_freeze_step: Option<usize>,
    pub last_freeze_step: Option<usize>,
    pub best_val_step: Option<usize>,
    pub wall_time_s: Option<f64>,
    /// Filled in when the run is compared against an `FP` baseline.
    pub flops_ratio_vs_fp: Option<f64>,
    pub speedup_vs_fp: Option<f64>,
}

/// Final state of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub summary: RunSummary,
    pub params: ModelParams<T>,
    pub adapters: Option<LoraSet<T>>,
    pub ledger: CostLedger,
    pub freeze_log: Vec<FreezeEvent>,
    pub es_history: Vec<(usize, f64)>,
}

type Clock = Box<dyn Fn() -> f64>;

/// A run in progress. Drive it with [`Experiment::step`] or
/// [`Experiment::run`].
pub struct Experiment<T> {
    cfg: RunConfig,
    params: ModelParams<T>,
    adapters: Option<LoraSet<T>>,
    data: Dataset,
    monitor: GradEsState<T>,
    monitor_cfg: GradEsConfig,
    es: Option<(EsConfig, EsState, usize)>,
    snapshot: Option<(ModelParams<T>, Option<LoraSet<T>>)>,
    optimizer: Optimizer<T>,
    ledger: CostLedger,
    cost: CostModel,
    step: usize,
    cursor: usize,
    stop: Option<StopReason>,
    diverged: Option<String>,
    clock: Option<Clock>,
}

impl<T: Real> Experiment<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ModelParams::init(&cfg.model)?;
        if let Some(p) = &cfg.pretrain {
            params = pretrain(cfg, p, params)?;
        }
        let data = gen_dataset(&cfg.task)?;
        let mode = cfg.train_mode();
        let adapters = match (mode, &cfg.lora) {
            (TrainMode::Lora(_), Some(l)) => Some(LoraSet::from_config(&cfg.model, l, cfg.seed)?),
            _ => None,
        };
        let mut monitor = match &adapters {
            Some(set) => GradEsState::for_adapters(set),
            None => GradEsState::for_model(&cfg.model),
        };
        let monitor_cfg = match cfg.grades_config() {
            Some(g) if cfg.method.uses_grades() => g,
            _ => {
                monitor.set_freezing(false);
                let mode = if adapters.is_some() {
                    MetricMode::GradNorm
                } else {
                    MetricMode::GradDiff
                };
                let mut g = GradEsConfig::new(1.0, 0.0, cfg.total_steps).with_mode(mode);
                if let Some(p) = &cfg.grades {
                    g.metric_mode = p.metric_mode.unwrap_or(mode);
                    g.normalize_by_size = p.normalize_by_size;
                }
                g
            }
        };
        let es = cfg.method.uses_es().then(|| {
            let e = cfg.es_config();
            (e, EsState::new(), e.interval(cfg.total_steps))
        });
        Ok(Self {
            cost: CostModel {
                config: cfg.model,
                mode,
                update_cost_per_param: cfg.optimizer.flops_per_param(),
            },
            optimizer: Optimizer::new(cfg.optimizer),
            cfg: cfg.clone(),
            params,
            adapters,
            data,
            monitor,
            monitor_cfg,
            es,
            snapshot: None,
            ledger: CostLedger::new(),
            step: 0,
            cursor: 0,
            stop: None,
            diverged: None,
            clock: None,
        })
    }

    /// Supplies a millisecond clock for per-step wall times.
    pub fn with_clock(mut self, clock: impl Fn() -> f64 + 'static) -> Self {
        self.clock = Some(Box::new(clock));
        self
    }

    /// Turns freezing off while keeping metric telemetry.
    pub fn disable_freezing(&mut self) {
        self.monitor.set_freezing(false);
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn adapters(&self) -> Option<&LoraSet<T>> {
        self.adapters.as_ref()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn frozen(&self) -> &BTreeSet<ComponentId> {
        self.monitor.frozen()
    }

    /// Components watched by the controller, in canonical order.
    pub fn components(&self) -> Vec<ComponentId> {
        self.monitor.components().to_vec()
    }

    pub fn controller_config(&self) -> &GradEsConfig {
        &self.monitor_cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop
    }

    fn diverge(&mut self, detail: String) -> Option<StopReason> {
        self.diverged = Some(detail);
        self.stop = Some(StopReason::Diverged);
        self.stop
    }

    fn next_batch(&mut self) -> Vec<Example> {
        let n = self.data.train.len();
        let batch = (0..self.cfg.batch_size)
            .map(|i| self.data.train[(self.cursor + i) % n].clone())
            .collect();
        self.cursor = (self.cursor + self.cfg.batch_size) % n;
        batch
    }

    /// Executes one training step. Returns the stop reason once the run is
    /// over; calling again after that is a contract error.
    pub fn step(&mut self, observer: &mut dyn RunObserver<T>) -> Result<Option<StopReason>> {
        if self.stop.is_some() {
            crate::bail!(Contract, "run already stopped");
        }
        let t = self.step + 1;
        let lr = self
            .cfg
            .optimizer
            .schedule
            .lr_at(self.cfg.optimizer.lr, t, self.cfg.total_steps);
        let batch = self.next_batch();
        let mode = if self.adapters.is_some() {
            GradMode::AdaptersOnly
        } else {
            GradMode::Full
        };

        let mut grads = GradientBundle::zeros(&self.cfg.model, self.adapters.as_ref());
        let mut loss_sum = 0.0;
        for e in &batch {
            let (logits, cache) =
                match forward_with(&self.params, self.adapters.as_ref(), &e.tokens) {
                    Ok(v) => v,
                    Err(Error::Numerical(msg)) => {
                        return Ok(self.diverge(format!("step {t}: {msg}")))
                    }
                    Err(err) => return Err(err),
                };
            let loss = loss_from(&logits, &e.targets, e.score_from)?;
            if !loss.is_finite() {
                return Ok(self.diverge(format!("step {t}: training loss is {loss}")));
            }
            loss_sum += loss.as_f64();
            let g = backward_with(
                &self.params,
                self.adapters.as_ref(),
                &cache,
                &e.targets,
                e.score_from,
                mode,
            )?;
            grads.accumulate(&g)?;
        }
        grads.scale(T::one() / T::from_usize(batch.len()));
        if !grads.is_finite() {
            let culprit = self
                .monitor
                .views(&grads)?
                .iter()
                .zip(self.monitor.components())
                .find(|(v, _)| v.l1().map_or(true, |x| !x.is_finite()))
                .map_or_else(
                    || "an unmonitored parameter".to_string(),
                    |(_, id)| id.to_string(),
                );
            return Ok(self.diverge(format!("step {t}: non-finite gradient in {culprit}")));
        }

        let obs = self.monitor.observe_bundle(t, &grads, &self.monitor_cfg)?;
        let lr_t = T::lit(lr);
        match self.adapters.as_mut() {
            Some(set) => apply_adapter_updates(
                set,
                &grads,
                lr_t,
                self.monitor.frozen(),
                &mut self.optimizer,
            )?,
            None => apply_updates(
                &mut self.params,
                &grads,
                lr_t,
                self.monitor.frozen(),
                &mut self.optimizer,
            )?,
        };
        let lens: Vec<usize> = batch.iter().map(|e| e.tokens.len()).collect();
        self.ledger
            .charge_step(&self.cost, t, &lens, self.monitor.frozen())?;

        let mut val_check = None;
        if let Some((es_cfg, state, interval)) = self.es.as_mut() {
            if t.is_multiple_of(*interval) {
                let val = validation_loss(
                    &self.params,
                    self.adapters.as_ref(),
                    &self.data.val,
                    &mut self.ledger,
                )?;
                let c = state.check(t, val, es_cfg)?;
                if c.improved {
                    self.snapshot = Some((self.params.clone(), self.adapters.clone()));
                }
                val_check = Some(ValCheck {
                    step: t,
                    val_loss: val,
                    best_val_loss: c.best_val_loss,
                    improved: c.improved,
                    checks_since_improvement: c.checks_since_improvement,
                    stop: c.decision == EsDecision::Stop,
                });
            }
        }

        let mut frozen_over_tau = Vec::new();
        if self.cfg.method.uses_grades() {
            let views = self.monitor.views(&grads)?;
            for (v, &id) in views.iter().zip(self.monitor.components()) {
                if self.monitor.is_frozen(id) && v.l1()? >= self.monitor_cfg.tau_for(id) {
                    frozen_over_tau.push(id);
                }
            }
        }
        let record = MetricsRecord {
            step: t,
            train_loss: loss_sum / batch.len() as f64,
            lr,
            metrics: obs.metrics,
            newly_frozen: obs.newly_frozen,
            frozen_count: self.monitor.frozen().len(),
            frozen_over_tau,
            flops: FlopTotals::of(&self.ledger),
            wall_time_ms: if self.cfg.record_wall_time {
                self.clock.as_ref().map(|c| c())
            } else {
                None
            },
        };
        for e in self.monitor.freeze_log().iter().filter(|e| e.step == t) {
            observer.on_freeze(e)?;
        }
        observer.on_step(
            &record,
            &StepView {
                step: t,
                params: &self.params,
                adapters: self.adapters.as_ref(),
                grads: &grads,
                frozen: self.monitor.frozen(),
            },
        )?;
        if let Some(c) = &val_check {
            observer.on_val_check(c)?;
        }

        self.step = t;
        if val_check.is_some_and(|c| c.stop) {
            if let Some((p, a)) = self.snapshot.take() {
                self.params = p;
                self.adapters = a;
            }
            self.stop = Some(StopReason::EarlyStopped);
        } else if self.cfg.method.uses_grades() && self.monitor.should_terminate() {
            self.stop = Some(StopReason::AllFrozen);
        } else if t == self.cfg.total_steps {
            self.stop = Some(StopReason::Completed);
        }
        Ok(self.stop)
    }

    /// Runs until a stop condition and returns the final state.
    pub fn run(mut self, observer: &mut dyn RunObserver<T>) -> Result<RunOutcome<T>> {
        while self.stop.is_none() {
            self.step(observer)?;
        }
        self.finish()
    }

    /// Final losses and summary. Evaluation here is not charged.
    pub fn finish(self) -> Result<RunOutcome<T>> {
        let Some(stop) = self.stop else {
            crate::bail!(Contract, "run has not stopped yet");
        };
        let healthy = stop != StopReason::Diverged;
        let eval = |set: &[Example]| -> Result<Option<f64>> {
            if !healthy || set.is_empty() {
                return Ok(None);
            }
            match mean_loss(&self.params, self.adapters.as_ref(), set) {
                Ok(v) => Ok(Some(v)),
                Err(Error::Numerical(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let final_train_loss = eval(&self.data.train)?;
        let final_val_loss = eval(&self.data.val)?;
        let log = self.monitor.freeze_log().to_vec();
        let es_state = self.es.map(|(_, s, _)| s);
        let l = &self.ledger;
        let summary = RunSummary {
            schema_version: SCHEMA_VERSION,
            method: self.cfg.method,
            precision: T::NAME.to_string(),
            seed: self.cfg.seed,
            total_steps: self.cfg.total_steps,
            steps_executed: self.step,
            stop_reason: stop,
            diverged: self.diverged,
            final_train_loss,
            final_val_loss,
            forward_flops: l.forward_flops,
            backward_flops: l.backward_flops,
            update_flops: l.update_flops,
            val_flops: l.val_flops,
            train_flops: l.train_flops(),
            total_flops: l.total_flops(),
            n_components: self.monitor.components().len(),
            frozen_count: self.monitor.frozen().len(),
            first_freeze_step: log.first().map(|e| e.step),
            last_freeze_step: log.last().map(|e| e.step),
            best_val_step: es_state.as_ref().and_then(|s| s.best_step),
            wall_time_s: None,
            flops_ratio_vs_fp: None,
            speedup_vs_fp: None,
        };
        Ok(RunOutcome {
            summary,
            params: self.params,
            adapters: self.adapters,
            ledger: self.ledger,
            freeze_log: log,
            es_history: es_state.map(|s| s.history).unwrap_or_default(),
        })
    }
}

fn pretrain<T: Real>(
    cfg: &RunConfig,
    p: &PretrainConfig,
    init: ModelParams<T>,
) -> Result<ModelParams<T>> {
    let task = p.task.clone().unwrap_or_else(|| cfg.task.clone());
    let data = gen_dataset(&task)?;
    let mut params = init;
    let mut opt = Optimizer::new(p.optimizer);
    let none = BTreeSet::new();
    let mut cursor = 0;
    for t in 1..=p.steps {
        let lr = p.optimizer.schedule.lr_at(p.optimizer.lr, t, p.steps);
        let mut grads = GradientBundle::zeros(&cfg.model, None);
        for _ in 0..p.batch_size {
            let e = &data.train[cursor % data.train.len()];
            cursor += 1;
            let (logits, cache) = forward_with(&params, None, &e.tokens)?;
            loss_from(&logits, &e.targets, e.score_from)?;
            let g = backward_with(
                &params,
                None,
                &cache,
                &e.targets,
                e.score_from,
                GradMode::Full,
            )?;
            grads.accumulate(&g)?;
        }
        grads.scale(T::one() / T::from_usize(p.batch_size));
        apply_updates(&mut params, &grads, T::lit(lr), &none, &mut opt)?;
    }
    Ok(params)
}

/// Convenience: build and run a configuration.
pub fn run_experiment<T: Real>(
    cfg: &RunConfig,
    observer: &mut dyn RunObserver<T>,
) -> Result<RunOutcome<T>> {
    Experiment::new(cfg)?.run(observer)
}

/// One row of a comparison against the plain full fine-tuning baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub steps_executed: usize,
    pub stop_reason: StopReason,
    pub total_flops: u64,
    pub flops_ratio_vs_fp: f64,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub frozen_count: usize,
    pub wall_time_s: Option<f64>,
    pub speedup_vs_fp: Option<f64>,
}

/// Ratios of every run against the single `FP` run. Validation FLOPs are
/// part of each run's total.
pub fn compare_runs(summaries: &[RunSummary]) -> Result<Vec<ComparisonRow>> {
    let mut fps = summaries.iter().filter(|s| s.method == Method::Fp);
    let fp = fps
        .next()
        .ok_or_else(|| Error::Config("comparison needs an FP baseline run".into()))?;
    if fps.next().is_some() {
        crate::bail!(Config, "comparison needs exactly one FP baseline run");
    }
    if fp.total_flops == 0 {
        crate::bail!(InvalidInput, "FP baseline has no recorded FLOPs");
    }
    Ok(summaries
        .iter()
        .map(|s| ComparisonRow {
            method: s.method,
            steps_executed: s.steps_executed,
            stop_reason: s.stop_reason,
            total_flops: s.total_flops,
            flops_ratio_vs_fp: s.total_flops as f64 / fp.total_flops as f64,
            final_train_loss: s.final_train_loss,
            final_val_loss: s.final_val_loss,
            frozen_count: s.frozen_count,
            wall_time_s: s.wall_time_s,
            speedup_vs_fp: match (fp.wall_time_s, s.wall_time_s) {
                (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                _ => None,
            },
        })
        .collect())
}

/// Threshold that puts `fraction` of the given metrics strictly below it.
///
/// With `k = ⌈fraction · n⌉` over the ascending values, this is the midpoint
/// of the k-th and (k+1)-th smallest. `fraction = 0` gives half the
/// minimum (zero when the minimum is zero) and `fraction = 1` gives a value
/// above the maximum.
pub fn quantile_threshold(values: &[f64], fraction: f64) -> Result<f64> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        crate::bail!(
            InvalidInput,
            "metrics must be non-empty, finite and non-negative"
        );
    }
    if !(0.0..=1.0).contains(&fraction) {
        crate::bail!(InvalidInput, "fraction must lie in [0, 1]");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let k = ceil_fraction(fraction, n);
    Ok(if k == 0 {
        v[0] / 2.0
    } else if k >= n {
        v[n - 1] * 1.5 + f64::MIN_POSITIVE
    } else {
        0.5 * (v[k - 1] + v[k])
    })
}

/// Result of a threshold probe.
#[derive(Debug, Clone, PartialEq)]
pub struct TauBracket {
    pub tau: f64,
    pub target_fraction: f64,
    /// Smallest metric per component over the probe window.
    pub metrics: Vec<(ComponentId, f64)>,
    pub first_step: usize,
    pub last_step: usize,
}

/// Runs `cfg` with freezing disabled up to `probe_steps` steps past the
/// grace period and returns a threshold that a `target_fraction` of
/// components would have crossed. With `probe_steps = 1` the fraction
/// frozen at the first eligible step of the real run is exact, because
/// runs are deterministic.
pub fn tau_bracket<T: Real>(
    cfg: &RunConfig,
    target_fraction: f64,
    probe_steps: usize,
) -> Result<TauBracket> {
    if !cfg.method.uses_grades() {
        crate::bail!(
            Config,
            "threshold probing needs a GradES method, got {}",
            cfg.method
        );
    }
    if probe_steps == 0 {
        crate::bail!(Config, "probe_steps must be positive");
    }
    let mut probe_cfg = cfg.clone();
    if let Some(es) = probe_cfg.early_stopping.as_mut() {
        es.patience = usize::MAX;
    }
    let mut exp = Experiment::<T>::new(&probe_cfg)?;
    exp.disable_freezing();
    let grace = exp.controller_config().grace_step();
    let first = grace + 1;
    let last = (grace + probe_steps).min(cfg.total_steps);
    if first > cfg.total_steps {
        crate::bail!(
            Config,
            "grace period covers the whole run; nothing to probe"
        );
    }
    let mut rec = Recorder::default();
    while exp.steps_done() < last {
        if let Some(reason) = exp.step(&mut rec)? {
            if exp.steps_done() < last {
                crate::bail!(Numerical, "probe run stopped early: {}", reason.as_str());
            }
        }
    }
    let mut best: Vec<(ComponentId, f64)> = Vec::new();
    for r in rec.steps.iter().filter(|r| r.step >= first) {
        if best.is_empty() {
            best = r.metrics.clone();
        } else {
            for (slot, &(_, m)) in best.iter_mut().zip(&r.metrics) {
                slot.1 = slot.1.min(m);
            }
        }
    }
    let values: Vec<f64> = best.iter().map(|&(_, m)| m).collect();
    Ok(TauBracket {
        tau: quantile_threshold(&values, target_fraction)?,
        target_fraction,
        metrics: best,
        first_step: first,
        last_step: last,
    })
}
