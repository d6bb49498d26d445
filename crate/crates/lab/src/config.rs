//! TOML run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use grades_core::experiment::RunConfig;
use serde::{Deserialize, Serialize};

/// Derive τ from a freezing-disabled probe run instead of taking it from
/// the file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BracketConfig {
    /// Fraction of components whose metric should fall below τ.
    pub target_fraction: f64,
    #[serde(default = "one")]
    pub probe_steps: usize,
}

fn one() -> usize {
    1
}

/// A run configuration file: every [`RunConfig`] field at top level plus an
/// optional `[bracket]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bracket: Option<BracketConfig>,
}

impl LabConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: LabConfig = toml::from_str(text).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if let Some(b) = &self.bracket {
            if !(0.0..=1.0).contains(&b.target_fraction) || b.probe_steps == 0 {
                bail!("bracket needs target_fraction in [0, 1] and probe_steps > 0");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            run: self.run.with_seed(seed),
            ..self.clone()
        }
    }
}

/// Floating-point width used for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => bail!("unknown precision {other:?} (expected f32 or f64)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use grades_core::experiment::Method;

    const MINIMAL: &str = r#"
        method = "FP_GradES"
        total_steps = 10
        batch_size = 2
        seed = 3

        [model]
        vocab_size = 6
        d_model = 8
        n_heads = 2
        n_layers = 1
        d_ff = 12
        max_seq_len = 8

        [task]
        kind = "copy"
        vocab_size = 6
        seq_len = 3
        n_train = 8
        n_val = 4

        [optimizer]
        kind = "adamw"
        lr = 0.01

        [grades]
        alpha = 0.5
        tau = 1

        [bracket]
        target_fraction = 0.5
    "#;

    #[test]
    fn parses_flattened_config() {
        let c = LabConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.run.method, Method::FpGradEs);
        assert_eq!(c.run.grades.as_ref().unwrap().tau, 1.0);
        assert_eq!(c.bracket.unwrap().probe_steps, 1);
        let again = LabConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_bracket_and_unknown_method() {
        let bad = MINIMAL.replace("target_fraction = 0.5", "target_fraction = 1.5");
        assert!(LabConfig::parse(&bad).is_err());
        let bad = MINIMAL.replace("FP_GradES", "SGD_Magic");
        assert!(LabConfig::parse(&bad).is_err());
    }

    #[test]
    fn precision_names() {
        assert_eq!("f64".parse::<Precision>().unwrap(), Precision::F64);
        assert!("f16".parse::<Precision>().is_err());
    }
}
