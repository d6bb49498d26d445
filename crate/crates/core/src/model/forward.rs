use alloc::vec::Vec;

use super::{Fnv, ModelParams, Role, RMS_EPS};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::{LoraAdapter, LoraSet};
use crate::model::ComponentId;
use crate::real::Real;

/// Row-wise RMS normalisation state kept for the backward pass.
#[derive(Clone, Debug)]
pub(super) struct NormCache<T> {
    /// `x / rms(x)`, before the gain.
    pub normed: Matrix<T>,
    pub inv_rms: Vec<T>,
}

#[derive(Clone, Debug)]
pub(super) struct LayerCache<T> {
    pub attn_norm: NormCache<T>,
    pub h_attn: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Causal attention probabilities, one `seq × seq` matrix per head.
    pub probs: Vec<Matrix<T>>,
    /// Concatenated head outputs, the input of `O`.
    pub attn_out: Matrix<T>,
    pub mlp_norm: NormCache<T>,
    pub h_mlp: Matrix<T>,
    pub gate: Matrix<T>,
    pub up: Matrix<T>,
    /// `silu(gate) ⊙ up`, the input of `Down`.
    pub act: Matrix<T>,
    /// Adapter bottleneck activations `x Aᵀ`, indexed by role.
    pub lora_hidden: [Option<Matrix<T>>; 7],
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache<T> {
    pub(super) tokens: Vec<usize>,
    pub(super) fingerprint: u64,
    pub(super) layers: Vec<LayerCache<T>>,
    pub(super) final_norm: NormCache<T>,
    pub(super) h_final: Matrix<T>,
    pub(super) logits: Matrix<T>,
    /// Matmul FLOPs executed by the forward pass.
    pub matmul_flops: u64,
}

impl<T> ActivationCache<T> {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

pub(super) fn fingerprint<T: Real>(params: &ModelParams<T>, adapters: Option<&LoraSet<T>>) -> u64 {
    let mut h = Fnv::new();
    h.word(params.fingerprint());
    if let Some(set) = adapters {
        h.word(set.fingerprint());
    }
    h.finish()
}

/// Matmul helpers that tally `2·m·n·k` FLOPs per call.
pub(super) struct Tally(pub u64);

impl Tally {
    pub fn mm<T: Real>(&mut self, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.0 += 2 * (a.rows() * a.cols() * b.cols()) as u64;
        a.matmul(b)
    }

    pub fn mm_t<T: Real>(&mut self, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.0 += 2 * (a.rows() * a.cols() * b.rows()) as u64;
        a.matmul_t(b)
    }

    pub fn t_mm<T: Real>(&mut self, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.0 += 2 * (a.rows() * a.cols() * b.cols()) as u64;
        a.t_matmul(b)
    }
}

/// `x Wᵀ`, plus `scale · (x Aᵀ) Bᵀ` when an adapter is attached. Returns the
/// output and the adapter bottleneck activation.
pub(super) fn linear<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    adapter: Option<&LoraAdapter<T>>,
    tally: &mut Tally,
) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
    let mut y = tally.mm_t(x, w)?;
    let Some(ad) = adapter else {
        return Ok((y, None));
    };
    let hidden = tally.mm_t(x, &ad.a)?;
    let delta = tally.mm_t(&hidden, &ad.b)?;
    y.add_scaled(&delta, ad.scale)?;
    Ok((y, Some(hidden)))
}

pub(super) fn rms_norm<T: Real>(x: &Matrix<T>, gain: &Matrix<T>) -> (Matrix<T>, NormCache<T>) {
    let d = T::from_usize(x.cols());
    let eps = T::lit(RMS_EPS);
    let mut normed = Matrix::zeros(x.rows(), x.cols());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv_rms = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = x.row(t);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
        let inv = T::one() / (ms + eps).sqrt();
        inv_rms.push(inv);
        for (j, &v) in row.iter().enumerate() {
            let n = v * inv;
            normed.set(t, j, n);
            out.set(t, j, n * gain.get(0, j));
        }
    }
    (out, NormCache { normed, inv_rms })
}

#[inline]
pub(super) fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp_m())
}

/// Runs the model without adapters.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    tokens: &[usize],
) -> Result<(Matrix<T>, ActivationCache<T>)> {
    forward_with(params, None, tokens)
}

/// Runs the model, routing every adapted matrix through its low-rank pair.
pub fn forward_with<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&LoraSet<T>>,
    tokens: &[usize],
) -> Result<(Matrix<T>, ActivationCache<T>)> {
    let cfg = &params.config;
    if tokens.is_empty() {
        crate::bail!(InvalidInput, "empty token sequence");
    }
    if tokens.len() > cfg.max_seq_len {
        crate::bail!(
            InvalidInput,
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        );
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        crate::bail!(
            InvalidInput,
            "token {bad} out of range for vocab {}",
            cfg.vocab_size
        );
    }
    if let Some(set) = adapters {
        set.check_compatible(cfg)?;
    }

    let seq = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let inv_sqrt_dh = T::one() / T::from_usize(dh).sqrt();
    let mut tally = Tally(0);

    let mut x = Matrix::from_fn(seq, d, |t, j| {
        params.token_embedding.get(tokens[t], j) + params.position_embedding.get(t, j)
    });

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let adapter = |role: Role| adapters.and_then(|s| s.get(ComponentId::new(l, role)));
        let w = |role: Role| &layer.weights[role.index()];
        let mut lora_hidden: [Option<Matrix<T>>; 7] = Default::default();

        let (h_attn, attn_norm) = rms_norm(&x, &layer.attn_norm);
        let (q, hq) = linear(&h_attn, w(Role::Q), adapter(Role::Q), &mut tally)?;
        let (k, hk) = linear(&h_attn, w(Role::K), adapter(Role::K), &mut tally)?;
        let (v, hv) = linear(&h_attn, w(Role::V), adapter(Role::V), &mut tally)?;
        lora_hidden[Role::Q.index()] = hq;
        lora_hidden[Role::K.index()] = hk;
        lora_hidden[Role::V.index()] = hv;

        let mut attn_out = Matrix::zeros(seq, d);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let (qh, kh, vh) = (
                q.columns(head * dh, dh),
                k.columns(head * dh, dh),
                v.columns(head * dh, dh),
            );
            let mut p = tally.mm_t(&qh, &kh)?;
            for i in 0..seq {
                let row = p.row_mut(i);
                let mut max = T::neg_infinity();
                for s in row[..=i].iter_mut() {
                    *s *= inv_sqrt_dh;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp_m();
                    total += *s;
                }
                for s in row[..=i].iter_mut() {
                    *s /= total;
                }
                for s in row[i + 1..].iter_mut() {
                    *s = T::zero();
                }
            }
            let oh = tally.mm(&p, &vh)?;
            attn_out.set_columns(head * dh, &oh);
            probs.push(p);
        }
        let (o, ho) = linear(&attn_out, w(Role::O), adapter(Role::O), &mut tally)?;
        lora_hidden[Role::O.index()] = ho;
        x.add_assign(&o)?;

        let (h_mlp, mlp_norm) = rms_norm(&x, &layer.mlp_norm);
        let (gate, hg) = linear(&h_mlp, w(Role::Gate), adapter(Role::Gate), &mut tally)?;
        let (up, hu) = linear(&h_mlp, w(Role::Up), adapter(Role::Up), &mut tally)?;
        lora_hidden[Role::Gate.index()] = hg;
        lora_hidden[Role::Up.index()] = hu;
        let act = gate.zip_with(&up, |g, u| g * sigmoid(g) * u)?;
        let (down, hd) = linear(&act, w(Role::Down), adapter(Role::Down), &mut tally)?;
        lora_hidden[Role::Down.index()] = hd;
        x.add_assign(&down)?;

        layers.push(LayerCache {
            attn_norm,
            h_attn,
            q,
            k,
            v,
            probs,
            attn_out,
            mlp_norm,
            h_mlp,
            gate,
            up,
            act,
            lora_hidden,
        });
    }

    let (h_final, final_norm) = rms_norm(&x, &params.final_norm);
    let logits = tally.mm_t(&h_final, &params.output_head)?;
    if !logits.is_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let cache = ActivationCache {
        tokens: tokens.to_vec(),
        fingerprint: fingerprint(params, adapters),
        layers,
        final_norm,
        h_final,
        logits: logits.clone(),
        matmul_flops: tally.0,
    };
    Ok((logits, cache))
}

/// Mean token-level cross-entropy over all positions.
pub fn loss<T: Real>(logits: &Matrix<T>, targets: &[usize]) -> Result<T> {
    loss_from(logits, targets, 0)
}

/// Mean cross-entropy over positions `score_from..`. Earlier positions are
/// context only.
pub fn loss_from<T: Real>(logits: &Matrix<T>, targets: &[usize], score_from: usize) -> Result<T> {
    check_targets(logits, targets, score_from)?;
    let mut total = T::zero();
    for (t, &y) in targets.iter().enumerate().skip(score_from) {
        total += log_sum_exp(logits.row(t)) - logits.get(t, y);
    }
    Ok(total / T::from_usize(targets.len() - score_from))
}

pub(super) fn check_targets<T: Real>(
    logits: &Matrix<T>,
    targets: &[usize],
    score_from: usize,
) -> Result<()> {
    if targets.len() != logits.rows() {
        crate::bail!(
            InvalidInput,
            "{} targets for {} positions",
            targets.len(),
            logits.rows()
        );
    }
    if score_from >= targets.len() {
        crate::bail!(
            InvalidInput,
            "no scored positions (score_from = {score_from})"
        );
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= logits.cols()) {
        crate::bail!(
            InvalidInput,
            "target {bad} out of range for vocab {}",
            logits.cols()
        );
    }
    Ok(())
}

pub(super) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&z| (z - max).exp_m()).sum::<T>().ln_m()
}
