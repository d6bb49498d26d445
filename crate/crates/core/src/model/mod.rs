//! A tiny pre-norm decoder-only transformer.
//!
//! Each layer owns exactly seven weight matrices: the attention projections
//! `Q, K, V, O` and a silu-gated MLP `Down(silu(Gate x) ⊙ Up x)`. Weights are
//! stored `d_out × d_in` and applied to row-major activations as `X Wᵀ`.
//!
//! Unmonitored parameters are the token embedding, a learned absolute
//! position embedding added to it, one RMS-norm gain vector before attention
//! and one before the MLP in every layer, a final RMS-norm gain, and an
//! untied output head. The head is kept separate from the embedding so that
//! a vocabulary row never seen as an input gets an exactly zero embedding
//! gradient.

mod backward;
mod component;
mod forward;

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub use backward::{backward, backward_with, GradMode};
pub use component::{ComponentId, Role};
pub use forward::{forward, forward_with, loss, loss_from, ActivationCache};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::LoraSet;
use crate::real::Real;
use crate::rng;

/// Epsilon inside the RMS normalisation square root.
pub const RMS_EPS: f64 = 1e-6;
/// Standard deviation of the truncated-normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                crate::bail!(Config, "{name} must be at least 1");
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            crate::bail!(
                Config,
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model,
                self.n_heads
            );
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_components(&self) -> usize {
        self.n_layers * Role::ALL.len()
    }

    pub fn components(&self) -> impl Iterator<Item = ComponentId> {
        ComponentId::all(self.n_layers)
    }

    /// `(d_out, d_in)` of a monitored matrix.
    pub fn role_shape(&self, role: Role) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match role {
            Role::Q | Role::K | Role::V | Role::O => (d, d),
            Role::Gate | Role::Up => (f, d),
            Role::Down => (d, f),
        }
    }

    pub fn shape_of(&self, key: ParamKey) -> (usize, usize) {
        let (v, d) = (self.vocab_size, self.d_model);
        match key {
            ParamKey::TokenEmbedding | ParamKey::OutputHead => (v, d),
            ParamKey::PositionEmbedding => (self.max_seq_len, d),
            ParamKey::FinalNorm | ParamKey::AttnNorm(_) | ParamKey::MlpNorm(_) => (1, d),
            ParamKey::Weight(id) => self.role_shape(id.role),
            ParamKey::LoraA(_) | ParamKey::LoraB(_) => (0, 0),
        }
    }

    /// Element count of all unmonitored parameters.
    pub fn unmonitored_params(&self) -> u64 {
        let (v, d) = (self.vocab_size as u64, self.d_model as u64);
        2 * v * d + self.max_seq_len as u64 * d + d + 2 * self.n_layers as u64 * d
    }

    pub fn component_params(&self, id: ComponentId) -> u64 {
        let (o, i) = self.role_shape(id.role);
        (o * i) as u64
    }
}

/// Addresses one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    TokenEmbedding,
    PositionEmbedding,
    OutputHead,
    FinalNorm,
    AttnNorm(usize),
    MlpNorm(usize),
    Weight(ComponentId),
    LoraA(ComponentId),
    LoraB(ComponentId),
}

impl ParamKey {
    pub fn is_monitored(self) -> bool {
        matches!(self, ParamKey::Weight(_))
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::TokenEmbedding => f.write_str("tok_emb"),
            ParamKey::PositionEmbedding => f.write_str("pos_emb"),
            ParamKey::OutputHead => f.write_str("head"),
            ParamKey::FinalNorm => f.write_str("final_norm"),
            ParamKey::AttnNorm(l) => write!(f, "L{l}.attn_norm"),
            ParamKey::MlpNorm(l) => write!(f, "L{l}.mlp_norm"),
            ParamKey::Weight(id) => write!(f, "{id}"),
            ParamKey::LoraA(id) => write!(f, "{id}.A"),
            ParamKey::LoraB(id) => write!(f, "{id}.B"),
        }
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tok_emb" => return Ok(ParamKey::TokenEmbedding),
            "pos_emb" => return Ok(ParamKey::PositionEmbedding),
            "head" => return Ok(ParamKey::OutputHead),
            "final_norm" => return Ok(ParamKey::FinalNorm),
            _ => {}
        }
        if let Some(id) = s.strip_suffix(".A") {
            return Ok(ParamKey::LoraA(id.parse()?));
        }
        if let Some(id) = s.strip_suffix(".B") {
            return Ok(ParamKey::LoraB(id.parse()?));
        }
        let layer_of = |p: &str| -> Result<usize> {
            p.strip_prefix('L')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::InvalidInput(format!("malformed parameter name {s:?}")))
        };
        if let Some(p) = s.strip_suffix(".attn_norm") {
            return Ok(ParamKey::AttnNorm(layer_of(p)?));
        }
        if let Some(p) = s.strip_suffix(".mlp_norm") {
            return Ok(ParamKey::MlpNorm(layer_of(p)?));
        }
        Ok(ParamKey::Weight(s.parse()?))
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct LayerParams<T> {
    pub attn_norm: Matrix<T>,
    pub mlp_norm: Matrix<T>,
    /// Indexed by `Role::index()`.
    pub weights: [Matrix<T>; 7],
}

/// Full parameter bundle. The same layout doubles as the container for base
/// gradients inside [`GradientBundle`].
#[derive(Clone, PartialEq, Debug)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub token_embedding: Matrix<T>,
    pub position_embedding: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Matrix<T>,
    pub output_head: Matrix<T>,
}

impl<T: Real> ModelParams<T> {
    /// Deterministic initialisation from `cfg.seed`: every matrix entry is
    /// drawn from Normal(0, 0.02) truncated at two standard deviations, norm
    /// gains start at one.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, rng::STREAM_WEIGHTS);
        let mut draw = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| {
                T::lit(rng::truncated_normal(&mut r, INIT_STD))
            })
        };
        let token_embedding = draw(cfg.vocab_size, cfg.d_model);
        let position_embedding = draw(cfg.max_seq_len, cfg.d_model);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let weights = Role::ALL.map(|role| {
                let (o, i) = cfg.role_shape(role);
                draw(o, i)
            });
            layers.push(LayerParams {
                attn_norm: Matrix::filled(1, cfg.d_model, T::one()),
                mlp_norm: Matrix::filled(1, cfg.d_model, T::one()),
                weights,
            });
        }
        let output_head = draw(cfg.vocab_size, cfg.d_model);
        Ok(Self {
            config: *cfg,
            token_embedding,
            position_embedding,
            layers,
            final_norm: Matrix::filled(1, cfg.d_model, T::one()),
            output_head,
        })
    }

    /// Same layout with every tensor zero.
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let z = |(r, c): (usize, usize)| Matrix::zeros(r, c);
        Self {
            config: *cfg,
            token_embedding: z(cfg.shape_of(ParamKey::TokenEmbedding)),
            position_embedding: z(cfg.shape_of(ParamKey::PositionEmbedding)),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    attn_norm: Matrix::zeros(1, cfg.d_model),
                    mlp_norm: Matrix::zeros(1, cfg.d_model),
                    weights: Role::ALL.map(|role| z(cfg.role_shape(role))),
                })
                .collect(),
            final_norm: Matrix::zeros(1, cfg.d_model),
            output_head: z(cfg.shape_of(ParamKey::OutputHead)),
        }
    }

    #[inline]
    pub fn monitored(&self, id: ComponentId) -> &Matrix<T> {
        &self.layers[id.layer].weights[id.role.index()]
    }

    #[inline]
    pub fn monitored_mut(&mut self, id: ComponentId) -> &mut Matrix<T> {
        &mut self.layers[id.layer].weights[id.role.index()]
    }

    /// Keys of every tensor in canonical order: unmonitored first, then the
    /// monitored matrices by `ComponentId`.
    pub fn keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::with_capacity(4 + 9 * self.layers.len());
        keys.extend([
            ParamKey::TokenEmbedding,
            ParamKey::PositionEmbedding,
            ParamKey::OutputHead,
            ParamKey::FinalNorm,
        ]);
        for l in 0..self.layers.len() {
            keys.push(ParamKey::AttnNorm(l));
            keys.push(ParamKey::MlpNorm(l));
        }
        keys.extend(self.config.components().map(ParamKey::Weight));
        keys
    }

    pub fn tensor(&self, key: ParamKey) -> Option<&Matrix<T>> {
        Some(match key {
            ParamKey::TokenEmbedding => &self.token_embedding,
            ParamKey::PositionEmbedding => &self.position_embedding,
            ParamKey::OutputHead => &self.output_head,
            ParamKey::FinalNorm => &self.final_norm,
            ParamKey::AttnNorm(l) => &self.layers.get(l)?.attn_norm,
            ParamKey::MlpNorm(l) => &self.layers.get(l)?.mlp_norm,
            ParamKey::Weight(id) => self.layers.get(id.layer)?.weights.get(id.role.index())?,
            ParamKey::LoraA(_) | ParamKey::LoraB(_) => return None,
        })
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut Matrix<T>> {
        Some(match key {
            ParamKey::TokenEmbedding => &mut self.token_embedding,
            ParamKey::PositionEmbedding => &mut self.position_embedding,
            ParamKey::OutputHead => &mut self.output_head,
            ParamKey::FinalNorm => &mut self.final_norm,
            ParamKey::AttnNorm(l) => &mut self.layers.get_mut(l)?.attn_norm,
            ParamKey::MlpNorm(l) => &mut self.layers.get_mut(l)?.mlp_norm,
            ParamKey::Weight(id) => self
                .layers
                .get_mut(id.layer)?
                .weights
                .get_mut(id.role.index())?,
            ParamKey::LoraA(_) | ParamKey::LoraB(_) => return None,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.keys()
            .into_iter()
            .all(|k| self.tensor(k).is_some_and(Matrix::is_finite))
    }

    /// FNV-1a over the bit patterns of every tensor, in key order.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for key in self.keys() {
            if let Some(m) = self.tensor(key) {
                h.matrix(m);
            }
        }
        h.finish()
    }
}

/// Gradients of one adapter pair.
#[derive(Clone, PartialEq, Debug)]
pub struct AdapterGrad<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

/// Output of a backward pass.
#[derive(Clone, PartialEq, Debug)]
pub struct GradientBundle<T> {
    /// Base-parameter gradients. All zero when the pass ran in
    /// [`GradMode::AdaptersOnly`].
    pub base: ModelParams<T>,
    /// Adapter gradients indexed by `ComponentId::index()`; empty when no
    /// adapters were attached.
    pub adapters: Vec<Option<AdapterGrad<T>>>,
    /// Matmul FLOPs actually executed by the pass that produced this bundle.
    pub matmul_flops: u64,
}

impl<T: Real> GradientBundle<T> {
    pub fn zeros(cfg: &ModelConfig, adapters: Option<&LoraSet<T>>) -> Self {
        let adapters = adapters
            .map(|set| {
                set.adapters()
                    .iter()
                    .map(|a| {
                        a.as_ref().map(|a| AdapterGrad {
                            a: Matrix::zeros(a.a.rows(), a.a.cols()),
                            b: Matrix::zeros(a.b.rows(), a.b.cols()),
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            base: ModelParams::zeros_like(cfg),
            adapters,
            matmul_flops: 0,
        }
    }

    #[inline]
    pub fn monitored(&self, id: ComponentId) -> &Matrix<T> {
        self.base.monitored(id)
    }

    pub fn adapter(&self, id: ComponentId) -> Option<&AdapterGrad<T>> {
        self.adapters.get(id.index())?.as_ref()
    }

    /// `self += other`, tensor by tensor. FLOP tallies are summed.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for key in self.base.keys() {
            let src = other
                .base
                .tensor(key)
                .ok_or_else(|| Error::Contract(format!("gradient bundle lacks {key}")))?;
            self.base
                .tensor_mut(key)
                .expect("own key")
                .add_assign(src)?;
        }
        if self.adapters.len() != other.adapters.len() {
            crate::bail!(Contract, "adapter gradient layouts differ");
        }
        for (mine, theirs) in self.adapters.iter_mut().zip(&other.adapters) {
            match (mine, theirs) {
                (Some(m), Some(t)) => {
                    m.a.add_assign(&t.a)?;
                    m.b.add_assign(&t.b)?;
                }
                (None, None) => {}
                _ => crate::bail!(Contract, "adapter gradient layouts differ"),
            }
        }
        self.matmul_flops += other.matmul_flops;
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for key in self.base.keys() {
            self.base
                .tensor_mut(key)
                .expect("own key")
                .scale_in_place(c);
        }
        for g in self.adapters.iter_mut().flatten() {
            g.a.scale_in_place(c);
            g.b.scale_in_place(c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.is_finite()
            && self
                .adapters
                .iter()
                .flatten()
                .all(|g| g.a.is_finite() && g.b.is_finite())
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn word(&mut self, w: u64) {
        for b in w.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn matrix<T: Real>(&mut self, m: &Matrix<T>) {
        self.word(m.rows() as u64);
        self.word(m.cols() as u64);
        for v in m.data() {
            self.word(v.bits());
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
