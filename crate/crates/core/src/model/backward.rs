use super::forward::{
    check_targets, fingerprint, log_sum_exp, sigmoid, ActivationCache, NormCache, Tally,
};
use super::{AdapterGrad, ComponentId, GradientBundle, ModelParams, Role};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::{LoraAdapter, LoraSet};
use crate::real::Real;

/// Which parameter gradients a backward pass materialises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients for every base parameter (and adapters, if attached).
    Full,
    /// Only adapter gradients; base gradients stay zero and the weight
    /// gradient matmuls are skipped. Activation gradients still flow through
    /// every base matrix.
    AdaptersOnly,
}

/// Exact gradients of the mean cross-entropy over all positions.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: &ActivationCache<T>,
    targets: &[usize],
) -> Result<GradientBundle<T>> {
    backward_with(params, None, cache, targets, 0, GradMode::Full)
}

/// Backward pass for `loss_from(logits, targets, score_from)`.
///
/// The frozen set is deliberately not an input: frozen matrices transmit
/// gradients exactly like trainable ones.
pub fn backward_with<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&LoraSet<T>>,
    cache: &ActivationCache<T>,
    targets: &[usize],
    score_from: usize,
    mode: GradMode,
) -> Result<GradientBundle<T>> {
    if cache.fingerprint != fingerprint(params, adapters) {
        return Err(Error::Contract(
            "activation cache was produced by different parameters".into(),
        ));
    }
    check_targets(&cache.logits, targets, score_from)?;
    if mode == GradMode::AdaptersOnly && adapters.is_none() {
        crate::bail!(Contract, "adapter-only backward pass without adapters");
    }

    let cfg = &params.config;
    let seq = cache.seq_len();
    let dh = cfg.head_dim();
    let inv_sqrt_dh = T::one() / T::from_usize(dh).sqrt();
    let full = mode == GradMode::Full;
    let mut grads = GradientBundle::zeros(cfg, adapters);
    let mut tally = Tally(0);

    // d loss / d logits = (softmax - onehot) / scored positions.
    let n_scored = T::from_usize(seq - score_from);
    let mut d_logits = Matrix::zeros(seq, cfg.vocab_size);
    for (t, &y) in targets.iter().enumerate().skip(score_from) {
        let row = cache.logits.row(t);
        let lse = log_sum_exp(row);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp_m();
            let onehot = if j == y { T::one() } else { T::zero() };
            d_logits.set(t, j, (p - onehot) / n_scored);
        }
    }

    let d_h_final = tally.mm(&d_logits, &params.output_head)?;
    if full {
        grads.base.output_head = tally.t_mm(&d_logits, &cache.h_final)?;
    }
    let mut dx = rms_norm_backward(
        &d_h_final,
        &params.final_norm,
        &cache.final_norm,
        full.then_some(&mut grads.base.final_norm),
    );

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let layer = &params.layers[l];
        let w = |role: Role| &layer.weights[role.index()];
        let adapter = |role: Role| adapters.and_then(|s| s.get(ComponentId::new(l, role)));
        let back = |role: Role,
                    dy: &Matrix<T>,
                    x: &Matrix<T>,
                    grads: &mut GradientBundle<T>,
                    tally: &mut Tally| {
            let id = ComponentId::new(l, role);
            let GradientBundle {
                base,
                adapters: adapter_grads,
                ..
            } = grads;
            linear_backward(
                dy,
                x,
                w(role),
                adapter(role),
                lc.lora_hidden[role.index()].as_ref(),
                full.then(|| base.monitored_mut(id)),
                adapter_grads.get_mut(id.index()).and_then(Option::as_mut),
                tally,
            )
        };

        // MLP block: x_out = x_mid + Down(silu(Gate h) ⊙ Up h).
        let d_act = back(Role::Down, &dx, &lc.act, &mut grads, &mut tally)?;
        let mut d_gate = Matrix::zeros(seq, cfg.d_ff);
        let mut d_up = Matrix::zeros(seq, cfg.d_ff);
        for i in 0..seq {
            for j in 0..cfg.d_ff {
                let g = lc.gate.get(i, j);
                let s = sigmoid(g);
                let da = d_act.get(i, j);
                d_up.set(i, j, da * g * s);
                d_gate.set(
                    i,
                    j,
                    da * lc.up.get(i, j) * s * (T::one() + g * (T::one() - s)),
                );
            }
        }
        let mut d_h_mlp = back(Role::Gate, &d_gate, &lc.h_mlp, &mut grads, &mut tally)?;
        d_h_mlp.add_assign(&back(Role::Up, &d_up, &lc.h_mlp, &mut grads, &mut tally)?)?;
        let d_mid = rms_norm_backward(
            &d_h_mlp,
            &layer.mlp_norm,
            &lc.mlp_norm,
            full.then(|| &mut grads.base.layers[l].mlp_norm),
        );
        dx.add_assign(&d_mid)?;

        // Attention block: x_mid = x_in + O(attn(h)).
        let d_attn_out = back(Role::O, &dx, &lc.attn_out, &mut grads, &mut tally)?;
        let mut dq = Matrix::zeros(seq, cfg.d_model);
        let mut dk = Matrix::zeros(seq, cfg.d_model);
        let mut dv = Matrix::zeros(seq, cfg.d_model);
        for (head, p) in lc.probs.iter().enumerate() {
            let off = head * dh;
            let (qh, kh, vh) = (
                lc.q.columns(off, dh),
                lc.k.columns(off, dh),
                lc.v.columns(off, dh),
            );
            let d_oh = d_attn_out.columns(off, dh);
            let d_p = tally.mm_t(&d_oh, &vh)?;
            dv.set_columns(off, &tally.t_mm(p, &d_oh)?);
            let mut d_s = Matrix::zeros(seq, seq);
            for i in 0..seq {
                let dot: T = (0..=i).map(|j| p.get(i, j) * d_p.get(i, j)).sum();
                for j in 0..=i {
                    d_s.set(i, j, p.get(i, j) * (d_p.get(i, j) - dot) * inv_sqrt_dh);
                }
            }
            dq.set_columns(off, &tally.mm(&d_s, &kh)?);
            dk.set_columns(off, &tally.t_mm(&d_s, &qh)?);
        }
        let mut d_h_attn = back(Role::Q, &dq, &lc.h_attn, &mut grads, &mut tally)?;
        d_h_attn.add_assign(&back(Role::K, &dk, &lc.h_attn, &mut grads, &mut tally)?)?;
        d_h_attn.add_assign(&back(Role::V, &dv, &lc.h_attn, &mut grads, &mut tally)?)?;
        let d_in = rms_norm_backward(
            &d_h_attn,
            &layer.attn_norm,
            &lc.attn_norm,
            full.then(|| &mut grads.base.layers[l].attn_norm),
        );
        dx.add_assign(&d_in)?;
    }

    if full {
        for (t, &tok) in cache.tokens.iter().enumerate() {
            for j in 0..cfg.d_model {
                let g = dx.get(t, j);
                let e = grads.base.token_embedding.get(tok, j);
                grads.base.token_embedding.set(tok, j, e + g);
                let p = grads.base.position_embedding.get(t, j);
                grads.base.position_embedding.set(t, j, p + g);
            }
        }
    }

    grads.matmul_flops = tally.0;
    Ok(grads)
}

/// Backward through `y = x Wᵀ + scale · (x Aᵀ) Bᵀ`. Writes `dW` and the
/// adapter gradients when the caller asks for them and returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    dy: &Matrix<T>,
    x: &Matrix<T>,
    w: &Matrix<T>,
    adapter: Option<&LoraAdapter<T>>,
    hidden: Option<&Matrix<T>>,
    d_w: Option<&mut Matrix<T>>,
    d_adapter: Option<&mut AdapterGrad<T>>,
    tally: &mut Tally,
) -> Result<Matrix<T>> {
    let mut dx = tally.mm(dy, w)?;
    if let Some(d_w) = d_w {
        *d_w = tally.t_mm(dy, x)?;
    }
    if let (Some(ad), Some(h)) = (adapter, hidden) {
        let d_hidden = tally.mm(dy, &ad.b)?.scale(ad.scale);
        if let Some(g) = d_adapter {
            g.b = tally.t_mm(dy, h)?.scale(ad.scale);
            g.a = tally.t_mm(&d_hidden, x)?;
        }
        dx.add_assign(&tally.mm(&d_hidden, &ad.a)?)?;
    }
    Ok(dx)
}

/// Backward through `y = gain ⊙ x / rms(x)`.
fn rms_norm_backward<T: Real>(
    dy: &Matrix<T>,
    gain: &Matrix<T>,
    cache: &NormCache<T>,
    d_gain: Option<&mut Matrix<T>>,
) -> Matrix<T> {
    let (rows, cols) = dy.shape();
    if let Some(dg) = d_gain {
        for t in 0..rows {
            for j in 0..cols {
                let v = dg.get(0, j) + dy.get(t, j) * cache.normed.get(t, j);
                dg.set(0, j, v);
            }
        }
    }
    let d = T::from_usize(cols);
    let mut dx = Matrix::zeros(rows, cols);
    for t in 0..rows {
        let dn: alloc::vec::Vec<T> = (0..cols).map(|j| dy.get(t, j) * gain.get(0, j)).collect();
        let mean_dot = dn
            .iter()
            .zip(cache.normed.row(t))
            .map(|(&a, &n)| a * n)
            .sum::<T>()
            / d;
        let inv = cache.inv_rms[t];
        for (j, &g) in dn.iter().enumerate().take(cols) {
            dx.set(t, j, inv * (g - cache.normed.get(t, j) * mean_dot));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward, forward_with};
    use crate::model::tests::small_config;
    use crate::model::{ModelConfig, ParamKey};

    #[test]
    fn one_token_vocab_has_zero_gradients() {
        let cfg = ModelConfig {
            vocab_size: 1,
            ..small_config(2)
        };
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let (_, cache) = forward(&p, &[0, 0, 0]).unwrap();
        let g = backward(&p, &cache, &[0, 0, 0]).unwrap();
        for key in g.base.keys() {
            assert!(
                g.base.tensor(key).unwrap().data().iter().all(|&v| v == 0.0),
                "{key}"
            );
        }
    }

    #[test]
    fn unused_vocab_row_gets_zero_embedding_gradient() {
        let p = ModelParams::<f64>::init(&small_config(3)).unwrap();
        let tokens = [1, 2, 3, 2];
        let (_, cache) = forward(&p, &tokens).unwrap();
        let g = backward(&p, &cache, &[2, 3, 2, 1]).unwrap();
        assert!(g.base.token_embedding.row(7).iter().all(|&v| v == 0.0));
        assert!(g.base.token_embedding.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stale_cache_is_a_contract_error() {
        let mut p = ModelParams::<f64>::init(&small_config(3)).unwrap();
        let (_, cache) = forward(&p, &[1, 2]).unwrap();
        p.monitored_mut(ComponentId::new(0, Role::V)).data_mut()[0] += 1e-3;
        assert!(matches!(
            backward(&p, &cache, &[2, 1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adapters_only_leaves_base_gradients_zero() {
        let cfg = small_config(5);
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let mut set = LoraSet::<f64>::new(&cfg, 2, 1.0, &Role::ALL, 9).unwrap();
        set.randomize_b(1, 0.1);
        let (_, cache) = forward_with(&p, Some(&set), &[1, 4, 2]).unwrap();
        let g = backward_with(
            &p,
            Some(&set),
            &cache,
            &[4, 2, 1],
            0,
            GradMode::AdaptersOnly,
        )
        .unwrap();
        assert!(g.base.keys().into_iter().all(|k: ParamKey| g
            .base
            .tensor(k)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0)));
        let id = ComponentId::new(1, Role::Gate);
        assert!(g.adapter(id).unwrap().a.data().iter().any(|&v| v != 0.0));
        assert!(g.adapter(id).unwrap().b.data().iter().any(|&v| v != 0.0));
    }
}
