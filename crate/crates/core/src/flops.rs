//! Analytic FLOPs accounting.
//!
//! A matmul of an `m × k` by a `k × n` matrix costs `2mnk`. Only matmuls
//! are counted in the forward and backward passes; element-wise work
//! (softmax, norms, activations) is ignored. Forward and backward cost does
//! not depend on which matrices are frozen, because frozen matrices still
//! propagate gradients. Only optimizer updates shrink as matrices freeze.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{ComponentId, ModelConfig, Role};

/// `2mnk`, rejecting zero dimensions and overflow.
pub fn matmul_flops(m: u64, n: u64, k: u64) -> Result<u64> {
    if m == 0 || n == 0 || k == 0 {
        crate::bail!(
            InvalidInput,
            "matmul dimensions must be positive, got {m}x{k} by {k}x{n}"
        );
    }
    2u64.checked_mul(m)
        .and_then(|x| x.checked_mul(n))
        .and_then(|x| x.checked_mul(k))
        .ok_or(Error::Overflow("matmul flops"))
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or(Error::Overflow("flops sum"))
}

/// Which matrices carry adapters, and their rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterLayout {
    pub rank: usize,
    pub roles: [bool; 7],
}

impl AdapterLayout {
    pub fn new(rank: usize, roles: &[Role]) -> Self {
        let mut mask = [false; 7];
        for r in roles {
            mask[r.index()] = true;
        }
        Self { rank, roles: mask }
    }

    pub fn from_config(cfg: &LoraConfig) -> Self {
        Self::new(cfg.rank, &cfg.roles)
    }

    pub fn covers(&self, role: Role) -> bool {
        self.roles[role.index()]
    }
}

/// Full fine-tuning, or training adapters only on a fixed base.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    Lora(AdapterLayout),
}

impl TrainMode {
    fn adapters(&self) -> Option<&AdapterLayout> {
        match self {
            TrainMode::Full => None,
            TrainMode::Lora(l) => Some(l),
        }
    }
}

fn attention_core(cfg: &ModelConfig, s: u64) -> Result<u64> {
    // Scores Q Kᵀ and the weighted sum P V, per head.
    let dh = cfg.head_dim() as u64;
    let per_head = add(matmul_flops(s, s, dh)?, matmul_flops(s, dh, s)?)?;
    per_head
        .checked_mul(cfg.n_heads as u64)
        .ok_or(Error::Overflow("attention flops"))
}

/// Forward-pass FLOPs for one sequence of `seq_len` tokens.
pub fn forward_flops(
    cfg: &ModelConfig,
    seq_len: usize,
    adapters: Option<&AdapterLayout>,
) -> Result<u64> {
    let s = seq_len as u64;
    let mut layer = attention_core(cfg, s)?;
    for role in Role::ALL {
        let (d_out, d_in) = cfg.role_shape(role);
        layer = add(layer, matmul_flops(s, d_out as u64, d_in as u64)?)?;
        if let Some(a) = adapters.filter(|a| a.covers(role)) {
            let r = a.rank as u64;
            layer = add(layer, matmul_flops(s, r, d_in as u64)?)?;
            layer = add(layer, matmul_flops(s, d_out as u64, r)?)?;
        }
    }
    let layers = layer
        .checked_mul(cfg.n_layers as u64)
        .ok_or(Error::Overflow("forward flops"))?;
    add(
        layers,
        matmul_flops(s, cfg.vocab_size as u64, cfg.d_model as u64)?,
    )
}

/// Backward-pass FLOPs for one sequence. Full mode computes input and
/// weight gradients for every matrix; adapter mode computes input
/// gradients through the base and gradients for the adapters only.
pub fn backward_flops(cfg: &ModelConfig, seq_len: usize, mode: TrainMode) -> Result<u64> {
    let s = seq_len as u64;
    let d = cfg.d_model as u64;
    let v = cfg.vocab_size as u64;
    let full = mode == TrainMode::Full;
    let dh = cfg.head_dim() as u64;
    // dP = dO Vᵀ, dV = Pᵀ dO, dQ = dS K, dK = dSᵀ Q.
    let per_head = 4 * matmul_flops(s, s, dh)?;
    let mut layer = per_head
        .checked_mul(cfg.n_heads as u64)
        .ok_or(Error::Overflow("attention flops"))?;
    for role in Role::ALL {
        let (d_out, d_in) = cfg.role_shape(role);
        let (o, i) = (d_out as u64, d_in as u64);
        layer = add(layer, matmul_flops(s, i, o)?)?;
        if full {
            layer = add(layer, matmul_flops(o, i, s)?)?;
        }
        if let Some(a) = mode.adapters().filter(|a| a.covers(role)) {
            let r = a.rank as u64;
            // dB, dH, dA and the extra input gradient through A.
            layer = add(layer, matmul_flops(o, r, s)?)?;
            layer = add(layer, matmul_flops(s, r, o)?)?;
            layer = add(layer, matmul_flops(r, i, s)?)?;
            layer = add(layer, matmul_flops(s, i, r)?)?;
        }
    }
    let mut total = layer
        .checked_mul(cfg.n_layers as u64)
        .ok_or(Error::Overflow("backward flops"))?;
    total = add(total, matmul_flops(s, d, v)?)?;
    if full {
        total = add(total, matmul_flops(v, d, s)?)?;
    }
    Ok(total)
}

/// Parameter entries that receive an update given the frozen set.
pub fn updated_params(cfg: &ModelConfig, frozen: &BTreeSet<ComponentId>, mode: TrainMode) -> u64 {
    let live = cfg.components().filter(|id| !frozen.contains(id));
    match mode {
        TrainMode::Full => {
            cfg.unmonitored_params() + live.map(|id| cfg.component_params(id)).sum::<u64>()
        }
        TrainMode::Lora(a) => live
            .filter(|id| a.covers(id.role))
            .map(|id| {
                let (o, i) = cfg.role_shape(id.role);
                (a.rank * (o + i)) as u64
            })
            .sum(),
    }
}

/// Update FLOPs: `cost_per_param` for every updated parameter entry.
pub fn update_flops(
    cfg: &ModelConfig,
    frozen: &BTreeSet<ComponentId>,
    mode: TrainMode,
    cost_per_param: u64,
) -> Result<u64> {
    updated_params(cfg, frozen, mode)
        .checked_mul(cost_per_param)
        .ok_or(Error::Overflow("update flops"))
}

/// Everything needed to price one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub config: ModelConfig,
    pub mode: TrainMode,
    pub update_cost_per_param: u64,
}

/// FLOPs charged at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepCost {
    pub step: usize,
    pub forward: u64,
    pub backward: u64,
    pub update: u64,
    pub val: u64,
}

/// Cumulative FLOPs of a run, with a per-step breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostLedger {
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub update_flops: u64,
    pub val_flops: u64,
    pub steps: Vec<StepCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Training FLOPs (forward + backward + update).
    pub fn train_flops(&self) -> u64 {
        self.forward_flops + self.backward_flops + self.update_flops
    }

    /// Training plus validation FLOPs.
    pub fn total_flops(&self) -> u64 {
        self.train_flops() + self.val_flops
    }

    /// Charges forward, backward and update cost of training step `step`
    /// over sequences of the given lengths, after the frozen set for this
    /// step has been settled.
    pub fn charge_step(
        &mut self,
        model: &CostModel,
        step: usize,
        seq_lens: &[usize],
        frozen: &BTreeSet<ComponentId>,
    ) -> Result<StepCost> {
        let mut c = StepCost {
            step,
            ..Default::default()
        };
        for &s in seq_lens {
            c.forward = add(
                c.forward,
                forward_flops(&model.config, s, model.mode.adapters())?,
            )?;
            c.backward = add(c.backward, backward_flops(&model.config, s, model.mode)?)?;
        }
        c.update = update_flops(
            &model.config,
            frozen,
            model.mode,
            model.update_cost_per_param,
        )?;
        self.forward_flops = add(self.forward_flops, c.forward)?;
        self.backward_flops = add(self.backward_flops, c.backward)?;
        self.update_flops = add(self.update_flops, c.update)?;
        self.steps.push(c);
        Ok(c)
    }

    /// Charges a validation forward pass to the current step.
    pub fn charge_val(&mut self, flops: u64) -> Result<()> {
        self.val_flops = add(self.val_flops, flops)?;
        if let Some(last) = self.steps.last_mut() {
            last.val = add(last.val, flops)?;
        }
        Ok(())
    }
}
