//! Low-rank adapters `W + scale · B A` on the monitored matrices.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l1_elementwise, Matrix};
use crate::model::{ComponentId, Fnv, ModelConfig, ModelParams, ParamKey, Role};
use crate::real::Real;
use crate::rng;

fn default_scale() -> f64 {
    1.0
}

fn all_roles() -> Vec<Role> {
    Role::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Multiplier on `B A`. Defaults to 1.0 (no alpha / rank rescaling).
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Roles that receive an adapter.
    #[serde(default = "all_roles")]
    pub roles: Vec<Role>,
    /// Freezing threshold for adapter pairs, used instead of the full-matrix
    /// threshold when the controller watches adapters.
    #[serde(default)]
    pub tau_r: Option<f64>,
}

/// One adapter pair for a `d_out × d_in` matrix: `A` is `r × d_in`, `B` is
/// `d_out × r`.
#[derive(Clone, PartialEq, Debug)]
pub struct LoraAdapter<T> {
    pub component: ComponentId,
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub rank: usize,
    pub scale: T,
}

impl<T: Real> LoraAdapter<T> {
    /// `B` starts at zero so the adapted layer equals the frozen one; `A` is
    /// Normal(0, 1/r) (standard deviation `1/√r`).
    pub fn new<R: rand::Rng>(
        component: ComponentId,
        d_out: usize,
        d_in: usize,
        rank: usize,
        scale: T,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > d_out.min(d_in) {
            crate::bail!(
                Config,
                "LoRA rank {rank} must be in 1..={} for a {d_out}x{d_in} matrix",
                d_out.min(d_in)
            );
        }
        let std = 1.0 / libm::sqrt(rank as f64);
        let a = Matrix::from_fn(rank, d_in, |_, _| T::lit(rng::normal(rng, std)));
        Ok(Self {
            component,
            a,
            b: Matrix::zeros(d_out, rank),
            rank,
            scale,
        })
    }

    /// Builds an adapter from explicit factors.
    pub fn from_parts(
        component: ComponentId,
        a: Matrix<T>,
        b: Matrix<T>,
        scale: T,
    ) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::Shape {
                expected: (b.rows(), a.rows()),
                got: b.shape(),
            });
        }
        let rank = a.rows();
        if rank > a.cols().min(b.rows()) {
            crate::bail!(Config, "rank {rank} exceeds min(d_out, d_in)");
        }
        Ok(Self {
            component,
            a,
            b,
            rank,
            scale,
        })
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn n_params(&self) -> u64 {
        (self.a.len() + self.b.len()) as u64
    }

    fn check_base(&self, w: &Matrix<T>) -> Result<()> {
        w.ensure_shape((self.d_out(), self.d_in()))
    }
}

/// `W x + scale · B (A x)` for column inputs `x` (`d_in × n`). `B A` is never
/// formed.
pub fn adapted_apply<T: Real>(
    w: &Matrix<T>,
    adapter: &LoraAdapter<T>,
    x: &Matrix<T>,
) -> Result<Matrix<T>> {
    adapter.check_base(w)?;
    let mut y = w.matmul(x)?;
    let low = adapter.b.matmul(&adapter.a.matmul(x)?)?;
    y.add_scaled(&low, adapter.scale)?;
    Ok(y)
}

/// `‖∇A‖₁,₁ + ‖∇B‖₁,₁`.
pub fn lora_grad_magnitude<T: Real>(grad_a: &Matrix<T>, grad_b: &Matrix<T>) -> Result<T> {
    if grad_a.rows() != grad_b.cols() {
        return Err(Error::Shape {
            expected: (grad_b.rows(), grad_a.rows()),
            got: grad_b.shape(),
        });
    }
    Ok(l1_elementwise(grad_a)? + l1_elementwise(grad_b)?)
}

/// `W + scale · B A`.
pub fn merge<T: Real>(w: &Matrix<T>, adapter: &LoraAdapter<T>) -> Result<Matrix<T>> {
    adapter.check_base(w)?;
    let mut out = w.clone();
    out.add_scaled(&adapter.b.matmul(&adapter.a)?, adapter.scale)?;
    Ok(out)
}

/// Adapters for a whole model, indexed by `ComponentId::index()`.
#[derive(Clone, PartialEq, Debug)]
pub struct LoraSet<T> {
    n_layers: usize,
    adapters: Vec<Option<LoraAdapter<T>>>,
}

impl<T: Real> LoraSet<T> {
    /// One adapter per `(layer, role)` for each listed role, drawn from the
    /// adapter stream of `seed`.
    pub fn new(
        cfg: &ModelConfig,
        rank: usize,
        scale: f64,
        roles: &[Role],
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if roles.is_empty() {
            crate::bail!(Config, "LoRA needs at least one role");
        }
        let mut r = rng::stream(seed, rng::STREAM_ADAPTERS);
        let adapters = cfg
            .components()
            .map(|id| {
                if !roles.contains(&id.role) {
                    return Ok(None);
                }
                let (d_out, d_in) = cfg.role_shape(id.role);
                LoraAdapter::new(id, d_out, d_in, rank, T::lit(scale), &mut r).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_layers: cfg.n_layers,
            adapters,
        })
    }

    pub fn from_config(cfg: &ModelConfig, lora: &LoraConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, lora.rank, lora.scale, &lora.roles, seed)
    }

    pub fn adapters(&self) -> &[Option<LoraAdapter<T>>] {
        &self.adapters
    }

    pub fn get(&self, id: ComponentId) -> Option<&LoraAdapter<T>> {
        self.adapters.get(id.index())?.as_ref()
    }

    pub fn get_mut(&mut self, id: ComponentId) -> Option<&mut LoraAdapter<T>> {
        self.adapters.get_mut(id.index())?.as_mut()
    }

    /// Components that carry an adapter, in canonical order.
    pub fn components(&self) -> Vec<ComponentId> {
        self.adapters
            .iter()
            .flatten()
            .map(|a| a.component)
            .collect()
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        self.components()
            .into_iter()
            .flat_map(|id| [ParamKey::LoraA(id), ParamKey::LoraB(id)])
            .collect()
    }

    pub fn tensor(&self, key: ParamKey) -> Option<&Matrix<T>> {
        match key {
            ParamKey::LoraA(id) => Some(&self.get(id)?.a),
            ParamKey::LoraB(id) => Some(&self.get(id)?.b),
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut Matrix<T>> {
        match key {
            ParamKey::LoraA(id) => Some(&mut self.get_mut(id)?.a),
            ParamKey::LoraB(id) => Some(&mut self.get_mut(id)?.b),
            _ => None,
        }
    }

    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_layers != cfg.n_layers || self.adapters.len() != cfg.n_components() {
            crate::bail!(Contract, "adapter set built for {} layers", self.n_layers);
        }
        for ad in self.adapters.iter().flatten() {
            let (o, i) = cfg.role_shape(ad.component.role);
            if (ad.d_out(), ad.d_in()) != (o, i) {
                return Err(Error::Shape {
                    expected: (o, i),
                    got: (ad.d_out(), ad.d_in()),
                });
            }
        }
        Ok(())
    }

    /// Copy of `base` with every adapter folded into its matrix.
    pub fn merged_into(&self, base: &ModelParams<T>) -> Result<ModelParams<T>> {
        self.check_compatible(&base.config)?;
        let mut out = base.clone();
        for ad in self.adapters.iter().flatten() {
            *out.monitored_mut(ad.component) = merge(base.monitored(ad.component), ad)?;
        }
        Ok(out)
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for ad in self.adapters.iter().flatten() {
            h.word(ad.component.index() as u64);
            h.word(ad.scale.bits());
            h.matrix(&ad.a);
            h.matrix(&ad.b);
        }
        h.finish()
    }

    /// Fills every `B` with Normal(0, std) draws. Only useful for tests that
    /// need a non-trivial adapter.
    pub fn randomize_b(&mut self, seed: u64, std: f64) {
        let mut r = rng::stream(seed, 0xB);
        for ad in self.adapters.iter_mut().flatten() {
            ad.b = Matrix::from_fn(ad.b.rows(), ad.b.cols(), |_, _| {
                T::lit(rng::normal(&mut r, std))
            });
        }
    }

    pub fn n_params(&self) -> u64 {
        self.adapters
            .iter()
            .flatten()
            .map(LoraAdapter::n_params)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform_matrix;

    fn id() -> ComponentId {
        ComponentId::new(0, Role::Q)
    }

    fn rel_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) -> bool {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn zero_b_or_zero_scale_is_the_frozen_path() {
        let mut r = rng::stream(1, 0);
        let w: Matrix<f64> = uniform_matrix(&mut r, 5, 4, -1.0, 1.0);
        let x: Matrix<f64> = uniform_matrix(&mut r, 4, 3, -1.0, 1.0);
        let ad = LoraAdapter::new(id(), 5, 4, 2, 1.0, &mut r).unwrap();
        assert_eq!(adapted_apply(&w, &ad, &x).unwrap(), w.matmul(&x).unwrap());
        assert_eq!(merge(&w, &ad).unwrap(), w);

        let mut ad = ad;
        ad.b = uniform_matrix(&mut r, 5, 2, -1.0, 1.0);
        ad.scale = 0.0;
        assert_eq!(adapted_apply(&w, &ad, &x).unwrap(), w.matmul(&x).unwrap());
    }

    #[test]
    fn rank_one_perturbation_matches_materialised_sum() {
        let mut r = rng::stream(2, 0);
        let w: Matrix<f64> = uniform_matrix(&mut r, 3, 3, -1.0, 1.0);
        // A = e1ᵀ (first row of identity), B = e1: B A = e1 e1ᵀ.
        let a = Matrix::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]]).unwrap();
        let ad = LoraAdapter::from_parts(id(), a, b, 1.0).unwrap();
        let x: Matrix<f64> = uniform_matrix(&mut r, 3, 4, -1.0, 1.0);
        let mut dense = w.clone();
        dense.set(0, 0, w.get(0, 0) + 1.0);
        let expected = dense.matmul(&x).unwrap();
        assert!(rel_close(
            &adapted_apply(&w, &ad, &x).unwrap(),
            &expected,
            1e-15
        ));
    }

    #[test]
    fn full_rank_merge_matches_dense_sum() {
        let mut r = rng::stream(3, 0);
        let w: Matrix<f64> = uniform_matrix(&mut r, 4, 3, -1.0, 1.0);
        let a: Matrix<f64> = uniform_matrix(&mut r, 3, 3, -1.0, 1.0);
        let b: Matrix<f64> = uniform_matrix(&mut r, 4, 3, -1.0, 1.0);
        let ad = LoraAdapter::from_parts(id(), a.clone(), b.clone(), 0.5).unwrap();
        let mut expected = w.clone();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += b.get(i, k) * a.get(k, j);
                }
                expected.set(i, j, w.get(i, j) + 0.5 * s);
            }
        }
        assert!(rel_close(&merge(&w, &ad).unwrap(), &expected, 1e-15));
    }

    #[test]
    fn merged_then_fresh_adapter_is_identity() {
        let mut r = rng::stream(4, 0);
        let w: Matrix<f64> = uniform_matrix(&mut r, 4, 4, -1.0, 1.0);
        let mut ad = LoraAdapter::new(id(), 4, 4, 2, 1.0, &mut r).unwrap();
        ad.b = uniform_matrix(&mut r, 4, 2, -1.0, 1.0);
        let merged = merge(&w, &ad).unwrap();
        let fresh = LoraAdapter::new(id(), 4, 4, 2, 1.0, &mut r).unwrap();
        let x: Matrix<f64> = uniform_matrix(&mut r, 4, 2, -1.0, 1.0);
        assert_eq!(
            adapted_apply(&merged, &fresh, &x).unwrap(),
            merged.matmul(&x).unwrap()
        );
        assert!(rel_close(
            &adapted_apply(&w, &ad, &x).unwrap(),
            &merged.matmul(&x).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn grad_magnitude_examples() {
        let za = Matrix::<f64>::zeros(2, 3);
        let zb = Matrix::<f64>::zeros(4, 2);
        assert_eq!(lora_grad_magnitude(&za, &zb).unwrap(), 0.0);
        let ga = Matrix::from_rows(&[&[1.0, -1.0]]).unwrap();
        let gb = Matrix::from_rows(&[&[2.0], &[0.0]]).unwrap();
        assert_eq!(lora_grad_magnitude::<f64>(&ga, &gb).unwrap(), 4.0);
        assert!(lora_grad_magnitude(&ga, &za).is_err());
    }

    #[test]
    fn grad_magnitude_seeded_matches_two_l1_sums() {
        let mut r = rng::stream(13, 0);
        let ga: Matrix<f64> = uniform_matrix(&mut r, 4, 6, -1.0, 1.0);
        let gb: Matrix<f64> = uniform_matrix(&mut r, 5, 4, -1.0, 1.0);
        let sa: f64 = ga.data().iter().map(|v| v.abs()).sum();
        let sb: f64 = gb.data().iter().map(|v| v.abs()).sum();
        assert_eq!(lora_grad_magnitude(&ga, &gb).unwrap(), sa + sb);
    }

    #[test]
    fn shape_and_rank_errors() {
        let mut r = rng::stream(5, 0);
        assert!(matches!(
            LoraAdapter::<f64>::new(id(), 4, 3, 4, 1.0, &mut r),
            Err(Error::Config(_))
        ));
        let ad = LoraAdapter::<f64>::new(id(), 4, 3, 2, 1.0, &mut r).unwrap();
        let wrong = Matrix::<f64>::zeros(3, 4);
        assert!(matches!(merge(&wrong, &ad), Err(Error::Shape { .. })));
        let x = Matrix::<f64>::zeros(4, 1);
        assert!(adapted_apply(&Matrix::zeros(4, 3), &ad, &x).is_err());
    }

    #[test]
    fn set_respects_role_mask() {
        let cfg = ModelConfig {
            vocab_size: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_seq_len: 8,
            seed: 0,
        };
        let set = LoraSet::<f64>::new(&cfg, 2, 1.0, &[Role::Q, Role::Down], 1).unwrap();
        assert_eq!(set.components().len(), 4);
        assert!(set.get(ComponentId::new(1, Role::Down)).is_some());
        assert!(set.get(ComponentId::new(1, Role::Up)).is_none());
        assert_eq!(
            set.get(ComponentId::new(0, Role::Down)).unwrap().a.shape(),
            (2, 16)
        );
        assert_eq!(set.keys().len(), 8);
    }
}
