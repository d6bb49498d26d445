//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GRDSCKPT"
//! version    u32
//! width      u8       bytes per value (4 = f32, 8 = f64)
//! config     7 × u64  vocab, d_model, heads, layers, d_ff, max_seq_len, seed
//! step       u64
//! lora_scale f64      0 when the file holds no adapters
//! count      u32
//! count × { name_len u16, name utf-8, rows u32, cols u32, rows·cols values }
//! ```
//!
//! Tensor names are the `ParamKey` display forms (`tok_emb`, `L0.Q`,
//! `L0.Q.A`, ...).

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use grades_core::linalg::Matrix;
use grades_core::lora::LoraSet;
use grades_core::model::{ModelConfig, ModelParams, ParamKey, Role};
use grades_core::real::Real;
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"GRDSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub step: u64,
    pub lora_scale: f64,
    pub tensors: Vec<(ParamKey, Matrix<T>)>,
}

impl<T: Real> Checkpoint<T> {
    /// Base parameters in canonical order followed by adapter factors.
    pub fn capture(params: &ModelParams<T>, adapters: Option<&LoraSet<T>>, step: u64) -> Self {
        let mut tensors: Vec<(ParamKey, Matrix<T>)> = params
            .keys()
            .into_iter()
            .filter_map(|k| Some((k, params.tensor(k)?.clone())))
            .collect();
        let mut lora_scale = 0.0;
        if let Some(set) = adapters {
            for k in set.keys() {
                if let Some(m) = set.tensor(k) {
                    tensors.push((k, m.clone()));
                }
            }
            lora_scale = set
                .adapters()
                .iter()
                .flatten()
                .next()
                .map_or(0.0, |a| a.scale.as_f64());
        }
        Self {
            config: params.config,
            step,
            lora_scale,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.d_model,
            c.n_heads,
            c.n_layers,
            c.d_ff,
            c.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.lora_scale.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (key, m) in &self.tensors {
            let name = key.to_string();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(8)? == MAGIC, "not a checkpoint file");
        let version = r.u32()?;
        ensure!(
            version == VERSION,
            "unsupported checkpoint version {version}"
        );
        let width = r.take(1)?[0] as usize;
        ensure!(
            width == T::BYTES,
            "checkpoint stores {width}-byte values but {} was requested",
            T::NAME
        );
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?)?;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            n_layers: dims[3],
            d_ff: dims[4],
            max_seq_len: dims[5],
            seed: r.u64()?,
        };
        config.validate()?;
        let step = r.u64()?;
        let lora_scale = f64::from_le_bytes(r.take(8)?.try_into()?);
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into()?) as usize;
            let name = std::str::from_utf8(r.take(len)?).context("tensor name is not utf-8")?;
            let key: ParamKey = name.parse()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows.checked_mul(cols).context("tensor size overflows")?;
            let raw = r.take(n.checked_mul(T::BYTES).context("tensor size overflows")?)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((key, Matrix::new(rows, cols, data)?));
        }
        ensure!(
            r.pos == bytes.len(),
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        );
        Ok(Self {
            config,
            step,
            lora_scale,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("in {}", path.display()))
    }

    /// Rebuilds the base parameters. Every base tensor must be present.
    pub fn params(&self) -> Result<ModelParams<T>> {
        let mut p = ModelParams::zeros_like(&self.config);
        let mut seen = 0;
        for (key, m) in &self.tensors {
            if matches!(key, ParamKey::LoraA(_) | ParamKey::LoraB(_)) {
                continue;
            }
            let slot = p
                .tensor_mut(*key)
                .with_context(|| format!("{key} does not fit the model"))?;
            slot.ensure_shape(m.shape())?;
            *slot = m.clone();
            seen += 1;
        }
        ensure!(
            seen == p.keys().len(),
            "checkpoint holds {seen} of {} base tensors",
            p.keys().len()
        );
        Ok(p)
    }

    /// Rebuilds the adapter set, if the file holds one.
    pub fn adapters(&self) -> Result<Option<LoraSet<T>>> {
        let factors: Vec<&(ParamKey, Matrix<T>)> = self
            .tensors
            .iter()
            .filter(|(k, _)| matches!(k, ParamKey::LoraA(_) | ParamKey::LoraB(_)))
            .collect();
        let Some((_, first)) = factors
            .iter()
            .find(|(k, _)| matches!(k, ParamKey::LoraA(_)))
        else {
            ensure!(factors.is_empty(), "adapter B factors without A factors");
            return Ok(None);
        };
        let rank = first.rows();
        let mut roles: Vec<Role> = Vec::new();
        for (k, _) in &factors {
            if let ParamKey::LoraA(id) | ParamKey::LoraB(id) = k {
                if !roles.contains(&id.role) {
                    roles.push(id.role);
                }
            }
        }
        let mut set = LoraSet::new(&self.config, rank, self.lora_scale, &roles, 0)?;
        ensure!(
            set.keys().len() == factors.len(),
            "checkpoint holds {} adapter factors, expected {}",
            factors.len(),
            set.keys().len()
        );
        for (key, m) in factors {
            let slot = set
                .tensor_mut(*key)
                .with_context(|| format!("{key} does not fit the adapters"))?;
            slot.ensure_shape(m.shape())?;
            *slot = m.clone();
        }
        Ok(Some(set))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            bail!("checkpoint truncated at byte {}", self.pos);
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
}

/// SHA-256 over a tensor's shape and little-endian values, hex encoded.
pub fn tensor_digest<T: Real>(m: &Matrix<T>) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    let mut buf = Vec::with_capacity(m.len() * T::BYTES);
    for &v in m.data() {
        v.write_le(&mut buf);
    }
    h.update(&buf);
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
