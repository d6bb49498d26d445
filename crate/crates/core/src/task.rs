//! Synthetic sequence tasks.
//!
//! The last vocabulary id is a separator; the others are content tokens.
//! An example is `input ++ [SEP] ++ target`, trained as next-token
//! prediction with the loss taken only over the target part.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// `seq_len` must be even: the input is two numbers of `seq_len / 2`
    /// base-`(vocab − 1)` digits, most significant first, and the target is
    /// their sum modulo `base^(seq_len/2)` in the same format.
    ModularAdd,
}

impl TaskKind {
    /// The answer for `input` over content tokens `0..base`.
    pub fn target_for(self, input: &[usize], base: usize) -> Vec<usize> {
        match self {
            TaskKind::Copy => input.to_vec(),
            TaskKind::Reverse => input.iter().rev().copied().collect(),
            TaskKind::ModularAdd => {
                let k = input.len() / 2;
                let mut out = alloc::vec![0; k];
                let mut carry = 0;
                for i in (0..k).rev() {
                    let s = input[i] + input[k + i] + carry;
                    out[i] = s % base;
                    carry = s / base;
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    #[serde(default)]
    pub seed: u64,
}

/// One training sequence. `targets[i]` is the token following `tokens[i]`;
/// positions before `score_from` are not scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub score_from: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl TaskSpec {
    pub fn separator(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn base(&self) -> usize {
        self.vocab_size - 1
    }

    fn target_len(&self) -> usize {
        match self.kind {
            TaskKind::ModularAdd => self.seq_len / 2,
            _ => self.seq_len,
        }
    }

    /// Number of tokens fed to the model per example.
    pub fn model_len(&self) -> usize {
        self.seq_len + self.target_len()
    }

    /// How many distinct inputs exist, saturating at `u64::MAX`.
    pub fn input_space(&self) -> u64 {
        (0..self.seq_len).fold(1u64, |acc, _| acc.saturating_mul(self.base() as u64))
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            crate::bail!(
                Config,
                "task vocabulary needs at least two content tokens and a separator"
            );
        }
        if self.seq_len == 0 {
            crate::bail!(Config, "task seq_len must be positive");
        }
        if self.kind == TaskKind::ModularAdd && !self.seq_len.is_multiple_of(2) {
            crate::bail!(
                Config,
                "modular addition needs an even seq_len, got {}",
                self.seq_len
            );
        }
        if self.n_train == 0 {
            crate::bail!(Config, "n_train must be positive");
        }
        let wanted = (self.n_train + self.n_val) as u64;
        if wanted > self.input_space() / 2 {
            crate::bail!(
                Config,
                "{wanted} distinct inputs requested but only {} exist; at most half may be used",
                self.input_space()
            );
        }
        Ok(())
    }

    pub fn example(&self, input: &[usize]) -> Example {
        let target = self.kind.target_for(input, self.base());
        let mut seq = Vec::with_capacity(input.len() + 1 + target.len());
        seq.extend_from_slice(input);
        seq.push(self.separator());
        seq.extend_from_slice(&target);
        Example {
            tokens: seq[..seq.len() - 1].to_vec(),
            targets: seq[1..].to_vec(),
            score_from: input.len(),
        }
    }
}

/// Deterministic train and validation sets with disjoint inputs.
pub fn gen_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::STREAM_DATA);
    let mut seen = BTreeSet::new();
    let mut examples = Vec::with_capacity(spec.n_train + spec.n_val);
    while examples.len() < spec.n_train + spec.n_val {
        let input: Vec<usize> = (0..spec.seq_len)
            .map(|_| r.random_range(0..spec.base()))
            .collect();
        if seen.insert(input.clone()) {
            examples.push(spec.example(&input));
        }
    }
    let val = examples.split_off(spec.n_train);
    Ok(Dataset {
        train: examples,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab_size: 8,
            seq_len: 4,
            n_train: 40,
            n_val: 10,
            seed: 3,
        }
    }

    #[test]
    fn targets() {
        assert_eq!(TaskKind::Copy.target_for(&[3, 1, 4], 7), vec![3, 1, 4]);
        assert_eq!(TaskKind::Reverse.target_for(&[3, 1, 4], 7), vec![4, 1, 3]);
        // 16 + 25 = 41 = 0x29, mod 0x100.
        assert_eq!(
            TaskKind::ModularAdd.target_for(&[1, 0, 1, 9], 16),
            vec![2, 9]
        );
        // 99 + 99 = 198, mod 100 = 98.
        assert_eq!(
            TaskKind::ModularAdd.target_for(&[9, 9, 9, 9], 10),
            vec![9, 8]
        );
    }

    #[test]
    fn example_layout() {
        let s = spec(TaskKind::Reverse);
        let e = s.example(&[0, 1, 2, 3]);
        assert_eq!(e.tokens, vec![0, 1, 2, 3, 7, 3, 2, 1]);
        assert_eq!(e.targets, vec![1, 2, 3, 7, 3, 2, 1, 0]);
        assert_eq!(e.score_from, 4);
        assert_eq!(e.tokens.len(), s.model_len());
    }

    #[test]
    fn dataset_is_deterministic_and_disjoint() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::ModularAdd] {
            let s = spec(kind);
            let a = gen_dataset(&s).unwrap();
            assert_eq!(a, gen_dataset(&s).unwrap());
            assert_eq!(a.train.len(), 40);
            assert_eq!(a.val.len(), 10);
            let train: BTreeSet<_> = a.train.iter().map(|e| e.tokens[..4].to_vec()).collect();
            assert_eq!(train.len(), 40);
            assert!(a.val.iter().all(|e| !train.contains(&e.tokens[..4])));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(TaskKind::ModularAdd);
        s.seq_len = 3;
        assert!(s.validate().is_err());
        let mut s = spec(TaskKind::Copy);
        s.seq_len = 1;
        assert!(s.validate().is_err());
    }
}
