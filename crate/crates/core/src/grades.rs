//! The per-matrix freezing controller.
//!
//! After a grace period of `⌈αT⌉` steps, every still-trainable matrix whose
//! gradient-change metric drops below `τ` is frozen for the rest of the run.
//! Frozen matrices keep participating in forward and backward passes; they
//! just stop receiving updates. Training ends once everything is frozen.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l1_diff, l1_elementwise, Matrix};
use crate::lora::LoraSet;
use crate::model::{ComponentId, GradientBundle, ModelConfig, ModelParams, ParamKey, Role};
use crate::optim::Optimizer;
use crate::real::Real;

/// How the per-matrix convergence metric is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MetricMode {
    /// `Σ|∇W_t − ∇W_{t−1}|`, the change of the gradient between steps.
    #[default]
    GradDiff,
    /// `Σ|∇W_t|`, the raw gradient magnitude.
    GradNorm,
}

/// Threshold override for a subset of components. `None` fields match
/// anything; the most specific matching override wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauOverride {
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub role: Option<Role>,
    pub tau: f64,
}

fn default_alpha() -> f64 {
    0.5
}

/// Controller settings as they appear in a run configuration; the step
/// budget comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEsParams {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub tau: f64,
    #[serde(default)]
    pub metric_mode: Option<MetricMode>,
    #[serde(default)]
    pub normalize_by_size: bool,
    #[serde(default)]
    pub tau_overrides: Vec<TauOverride>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEsConfig {
    pub alpha: f64,
    pub tau: f64,
    pub total_steps: usize,
    pub metric_mode: MetricMode,
    pub normalize_by_size: bool,
    pub tau_overrides: Vec<TauOverride>,
}

impl GradEsConfig {
    pub fn new(alpha: f64, tau: f64, total_steps: usize) -> Self {
        Self {
            alpha,
            tau,
            total_steps,
            metric_mode: MetricMode::GradDiff,
            normalize_by_size: false,
            tau_overrides: Vec::new(),
        }
    }

    pub fn from_params(p: &GradEsParams, total_steps: usize, default_mode: MetricMode) -> Self {
        Self {
            alpha: p.alpha,
            tau: p.tau,
            total_steps,
            metric_mode: p.metric_mode.unwrap_or(default_mode),
            normalize_by_size: p.normalize_by_size,
            tau_overrides: p.tau_overrides.clone(),
        }
    }

    pub fn with_mode(mut self, mode: MetricMode) -> Self {
        self.metric_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            crate::bail!(Config, "alpha must lie in [0, 1], got {}", self.alpha);
        }
        if self.total_steps == 0 {
            crate::bail!(Config, "total_steps must be positive");
        }
        let taus = core::iter::once(self.tau).chain(self.tau_overrides.iter().map(|o| o.tau));
        for tau in taus {
            if tau.is_nan() || tau < 0.0 {
                crate::bail!(Config, "tau must be a non-negative number, got {tau}");
            }
        }
        Ok(())
    }

    /// Last step of the grace period, `⌈αT⌉`.
    pub fn grace_step(&self) -> usize {
        ceil_fraction(self.alpha, self.total_steps)
    }

    pub fn tau_for(&self, id: ComponentId) -> f64 {
        let mut best: Option<(u8, f64)> = None;
        for o in &self.tau_overrides {
            let layer_ok = o.layer.is_none_or(|l| l == id.layer);
            let role_ok = o.role.is_none_or(|r| r == id.role);
            if !(layer_ok && role_ok) {
                continue;
            }
            let specificity = 2 * u8::from(o.role.is_some()) + u8::from(o.layer.is_some());
            if best.is_none_or(|(s, _)| specificity > s) {
                best = Some((specificity, o.tau));
            }
        }
        best.map_or(self.tau, |(_, t)| t)
    }
}

/// `⌈fraction · total⌉`, snapping products within 1e-9 of an integer so
/// that e.g. `0.55 · 100` yields 55 rather than 56.
pub fn ceil_fraction(fraction: f64, total: usize) -> usize {
    let x = fraction * total as f64;
    let r = libm::round(x);
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        libm::ceil(x) as usize
    }
}

/// Gradient of one monitored unit: a full matrix, or an adapter pair.
#[derive(Debug, Clone, Copy)]
pub enum GradView<'a, T> {
    Full(&'a Matrix<T>),
    LowRank { a: &'a Matrix<T>, b: &'a Matrix<T> },
}

impl<'a, T: Real> GradView<'a, T> {
    fn parts(&self) -> [Option<&'a Matrix<T>>; 2] {
        match *self {
            GradView::Full(m) => [Some(m), None],
            GradView::LowRank { a, b } => [Some(a), Some(b)],
        }
    }

    /// Raw magnitude `Σ‖part‖₁,₁`; for adapters this is `‖∇A‖₁ + ‖∇B‖₁`.
    pub fn l1(&self) -> Result<f64> {
        match *self {
            GradView::Full(m) => Ok(l1_elementwise(m)?.as_f64()),
            GradView::LowRank { a, b } => Ok(crate::lora::lora_grad_magnitude(a, b)?.as_f64()),
        }
    }

    fn len(&self) -> usize {
        self.parts().iter().flatten().map(|m| m.len()).sum()
    }
}

/// One freezing event.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeEvent {
    pub step: usize,
    pub component: ComponentId,
    pub metric: f64,
    pub tau: f64,
}

/// What the controller saw and decided at one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepObservation {
    pub step: usize,
    /// Metric of every component that was still trainable when measured.
    pub metrics: Vec<(ComponentId, f64)>,
    /// Components frozen at this step, in canonical order.
    pub newly_frozen: Vec<ComponentId>,
}

/// Controller memory. Single owner; advanced once per training step.
#[derive(Debug, Clone)]
pub struct GradEsState<T> {
    components: Vec<ComponentId>,
    shapes: Vec<[Option<(usize, usize)>; 2]>,
    prev_grad: Vec<[Option<Matrix<T>>; 2]>,
    frozen: BTreeSet<ComponentId>,
    step: usize,
    freeze_log: Vec<FreezeEvent>,
    freezing: bool,
}

impl<T: Real> GradEsState<T> {
    /// Watches the given components, each with one or two gradient parts of
    /// the listed shapes. Previous gradients start at zero.
    pub fn new(layout: Vec<(ComponentId, Vec<(usize, usize)>)>) -> Result<Self> {
        let mut components = Vec::with_capacity(layout.len());
        let mut shapes = Vec::with_capacity(layout.len());
        let mut prev_grad = Vec::with_capacity(layout.len());
        for (id, parts) in layout {
            if parts.is_empty() || parts.len() > 2 {
                crate::bail!(
                    InvalidInput,
                    "component {id} needs one or two gradient parts"
                );
            }
            if components.last().is_some_and(|&last| last >= id) {
                crate::bail!(InvalidInput, "components must be strictly increasing");
            }
            let mut s = [None, None];
            let mut p = [None, None];
            for (k, &(r, c)) in parts.iter().enumerate() {
                s[k] = Some((r, c));
                p[k] = Some(Matrix::zeros(r, c));
            }
            components.push(id);
            shapes.push(s);
            prev_grad.push(p);
        }
        Ok(Self {
            components,
            shapes,
            prev_grad,
            frozen: BTreeSet::new(),
            step: 0,
            freeze_log: Vec::new(),
            freezing: true,
        })
    }

    /// Watches all `7·L` monitored matrices.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        let layout = cfg
            .components()
            .map(|id| (id, alloc::vec![cfg.role_shape(id.role)]))
            .collect();
        Self::new(layout).expect("canonical layout is valid")
    }

    /// Watches every adapter pair of `set`.
    pub fn for_adapters(set: &LoraSet<T>) -> Self {
        let layout = set
            .adapters()
            .iter()
            .flatten()
            .map(|a| (a.component, alloc::vec![a.a.shape(), a.b.shape()]))
            .collect();
        Self::new(layout).expect("canonical layout is valid")
    }

    pub fn components(&self) -> &[ComponentId] {
        &self.components
    }

    pub fn frozen(&self) -> &BTreeSet<ComponentId> {
        &self.frozen
    }

    pub fn is_frozen(&self, id: ComponentId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn freeze_log(&self) -> &[FreezeEvent] {
        &self.freeze_log
    }

    /// Disables freezing while still measuring metrics and tracking
    /// previous gradients. Used for threshold probes and plain runs.
    pub fn set_freezing(&mut self, enabled: bool) {
        self.freezing = enabled;
    }

    fn position(&self, id: ComponentId) -> Result<usize> {
        self.components
            .binary_search(&id)
            .map_err(|_| Error::InvalidInput(format!("unknown component {id}")))
    }

    fn check_shapes(&self, idx: usize, grad: &GradView<'_, T>) -> Result<()> {
        for (part, shape) in grad.parts().iter().zip(&self.shapes[idx]) {
            match (part, shape) {
                (Some(m), Some(s)) => m.ensure_shape(*s)?,
                (None, None) => {}
                _ => crate::bail!(
                    InvalidInput,
                    "gradient layout does not match component {}",
                    self.components[idx]
                ),
            }
        }
        Ok(())
    }

    /// Metric for `id` given its current gradient, relative to the stored
    /// previous gradient.
    pub fn component_metric(
        &self,
        id: ComponentId,
        grad: &GradView<'_, T>,
        cfg: &GradEsConfig,
    ) -> Result<f64> {
        let idx = self.position(id)?;
        self.metric_at(idx, grad, cfg)
    }

    fn metric_at(&self, idx: usize, grad: &GradView<'_, T>, cfg: &GradEsConfig) -> Result<f64> {
        self.check_shapes(idx, grad)?;
        let raw = match cfg.metric_mode {
            MetricMode::GradNorm => grad.l1()?,
            MetricMode::GradDiff => {
                let mut total = 0.0;
                for (part, prev) in grad.parts().iter().zip(&self.prev_grad[idx]) {
                    if let (Some(g), Some(p)) = (part, prev) {
                        total += l1_diff(g, p)?.as_f64();
                    }
                }
                total
            }
        };
        Ok(if cfg.normalize_by_size {
            raw / grad.len() as f64
        } else {
            raw
        })
    }

    /// Advances the controller to `step`. `grads` lists one view per
    /// watched component, in `components()` order.
    pub fn observe_step(
        &mut self,
        step: usize,
        grads: &[GradView<'_, T>],
        cfg: &GradEsConfig,
    ) -> Result<StepObservation> {
        if step != self.step + 1 {
            crate::bail!(
                Contract,
                "controller at step {} cannot observe step {step}",
                self.step
            );
        }
        if grads.len() != self.components.len() {
            crate::bail!(
                InvalidInput,
                "{} gradients for {} components",
                grads.len(),
                self.components.len()
            );
        }
        for (idx, g) in grads.iter().enumerate() {
            self.check_shapes(idx, g)?;
        }
        let monitoring = step > cfg.grace_step();
        let mut obs = StepObservation {
            step,
            ..Default::default()
        };
        for (idx, g) in grads.iter().enumerate() {
            let id = self.components[idx];
            if self.frozen.contains(&id) {
                continue;
            }
            let metric = self.metric_at(idx, g, cfg)?;
            obs.metrics.push((id, metric));
            let tau = cfg.tau_for(id);
            if self.freezing && monitoring && metric < tau {
                obs.newly_frozen.push(id);
                self.freeze_log.push(FreezeEvent {
                    step,
                    component: id,
                    metric,
                    tau,
                });
            }
        }
        self.frozen.extend(obs.newly_frozen.iter().copied());
        // Previous gradients are refreshed for every component, frozen or not.
        for (idx, g) in grads.iter().enumerate() {
            for (slot, part) in self.prev_grad[idx].iter_mut().zip(g.parts()) {
                if let (Some(dst), Some(src)) = (slot.as_mut(), part) {
                    dst.data_mut().copy_from_slice(src.data());
                }
            }
        }
        self.step = step;
        Ok(obs)
    }

    /// Convenience wrapper pulling the watched gradients out of a bundle.
    pub fn observe_bundle(
        &mut self,
        step: usize,
        grads: &GradientBundle<T>,
        cfg: &GradEsConfig,
    ) -> Result<StepObservation> {
        let views = self.views(grads)?;
        self.observe_step(step, &views, cfg)
    }

    /// Views of the watched gradients inside `grads`: adapter pairs when the
    /// controller watches adapters, full matrices otherwise.
    pub fn views<'a>(&self, grads: &'a GradientBundle<T>) -> Result<Vec<GradView<'a, T>>> {
        self.components
            .iter()
            .zip(&self.shapes)
            .map(|(&id, shapes)| {
                if shapes[1].is_some() {
                    let g = grads.adapter(id).ok_or_else(|| {
                        Error::InvalidInput(format!("no adapter gradient for {id}"))
                    })?;
                    Ok(GradView::LowRank { a: &g.a, b: &g.b })
                } else {
                    Ok(GradView::Full(grads.monitored(id)))
                }
            })
            .collect()
    }

    /// True once every watched component is frozen.
    pub fn should_terminate(&self) -> bool {
        !self.components.is_empty() && self.frozen.len() == self.components.len()
    }
}

/// Frozen sets after each of steps `1..=steps`, rebuilt from a freeze log.
pub fn replay_freeze_log(log: &[FreezeEvent], steps: usize) -> Vec<BTreeSet<ComponentId>> {
    let mut out = Vec::with_capacity(steps);
    let mut current = BTreeSet::new();
    let mut events = log.iter().peekable();
    for step in 1..=steps {
        while let Some(e) = events.next_if(|e| e.step == step) {
            current.insert(e.component);
        }
        out.push(current.clone());
    }
    out
}

/// Count of parameter entries touched by an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateStats {
    pub updated_params: u64,
}

/// Updates every monitored matrix outside `frozen` plus all unmonitored
/// parameters. Frozen matrices are left bit-identical. If any gradient is
/// non-finite nothing is updated.
pub fn apply_updates<T: Real>(
    params: &mut ModelParams<T>,
    grads: &GradientBundle<T>,
    lr: T,
    frozen: &BTreeSet<ComponentId>,
    optimizer: &mut Optimizer<T>,
) -> Result<UpdateStats> {
    let keys = params.keys();
    for &key in &keys {
        let g = grads
            .base
            .tensor(key)
            .ok_or_else(|| Error::Contract(format!("missing gradient for {key}")))?;
        g.ensure_shape(params.tensor(key).expect("own key").shape())?;
        if !g.is_finite() {
            crate::bail!(Numerical, "non-finite gradient for {key}; update aborted");
        }
    }
    let mut stats = UpdateStats::default();
    for key in keys {
        if let ParamKey::Weight(id) = key {
            if frozen.contains(&id) {
                continue;
            }
        }
        let g = grads.base.tensor(key).expect("checked above");
        let p = params.tensor_mut(key).expect("own key");
        optimizer.update(key, p, g, lr)?;
        stats.updated_params += g.len() as u64;
    }
    Ok(stats)
}

/// Updates adapter pairs outside `frozen`; `A` and `B` of a frozen
/// component are both skipped. Base parameters are never touched.
pub fn apply_adapter_updates<T: Real>(
    adapters: &mut LoraSet<T>,
    grads: &GradientBundle<T>,
    lr: T,
    frozen: &BTreeSet<ComponentId>,
    optimizer: &mut Optimizer<T>,
) -> Result<UpdateStats> {
    for id in adapters.components() {
        let g = grads
            .adapter(id)
            .ok_or_else(|| Error::Contract(format!("missing adapter gradient for {id}")))?;
        if !(g.a.is_finite() && g.b.is_finite()) {
            crate::bail!(
                Numerical,
                "non-finite adapter gradient for {id}; update aborted"
            );
        }
    }
    let mut stats = UpdateStats::default();
    for id in adapters.components() {
        if frozen.contains(&id) {
            continue;
        }
        let g = grads.adapter(id).expect("checked above");
        let ad = adapters.get_mut(id).expect("listed component");
        optimizer.update(ParamKey::LoraA(id), &mut ad.a, &g.a, lr)?;
        optimizer.update(ParamKey::LoraB(id), &mut ad.b, &g.b, lr)?;
        stats.updated_params += (g.a.len() + g.b.len()) as u64;
    }
    Ok(stats)
}
