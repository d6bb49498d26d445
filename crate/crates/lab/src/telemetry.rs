//! Run telemetry on disk: `metrics.jsonl`, `freeze_log.jsonl` and
//! `metrics.csv`.
//!
//! Every JSON line is a typed struct, so field order is fixed and reruns
//! of a deterministic run produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use grades_core::error::Error as CoreError;
use grades_core::experiment::{
    FlopTotals, MetricsRecord, RunObserver, StepView, ValCheck, SCHEMA_VERSION,
};
use grades_core::grades::FreezeEvent;
use grades_core::model::{ComponentId, Role};
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FREEZE_LOG_FILE: &str = "freeze_log.jsonl";
pub const METRICS_CSV_FILE: &str = "metrics.csv";

/// Serialises `(component, value)` pairs as a `{"L0.Q": value}` object.
struct ComponentMap<'a>(&'a [(ComponentId, f64)]);

impl Serialize for ComponentMap<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (id, v) in self.0 {
            m.serialize_entry(&id.to_string(), v)?;
        }
        m.end()
    }
}

#[derive(Serialize)]
struct StepLine<'a> {
    schema_version: u32,
    #[serde(rename = "type")]
    kind: &'static str,
    step: usize,
    train_loss: f64,
    lr: f64,
    metrics: ComponentMap<'a>,
    newly_frozen: Vec<String>,
    frozen_count: usize,
    frozen_over_tau: Vec<String>,
    flops: FlopTotals,
    wall_time_ms: Option<f64>,
}

#[derive(Serialize)]
struct ValLine {
    schema_version: u32,
    #[serde(rename = "type")]
    kind: &'static str,
    step: usize,
    val_loss: f64,
    best_val_loss: f64,
    improved: bool,
    checks_since_improvement: usize,
    stop: bool,
}

/// One line of `freeze_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeLine {
    pub schema_version: u32,
    pub step: usize,
    pub layer: usize,
    pub role: Role,
    pub metric: f64,
    pub tau: f64,
}

impl From<&FreezeEvent> for FreezeLine {
    fn from(e: &FreezeEvent) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            step: e.step,
            layer: e.component.layer,
            role: e.component.role,
            metric: e.metric,
            tau: e.tau,
        }
    }
}

impl FreezeLine {
    pub fn to_event(&self) -> FreezeEvent {
        FreezeEvent {
            step: self.step,
            component: ComponentId::new(self.layer, self.role),
            metric: self.metric,
            tau: self.tau,
        }
    }
}

pub fn read_freeze_log(path: &Path) -> Result<Vec<FreezeEvent>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str::<FreezeLine>(l)?.to_event()))
        .collect()
}

/// Observer that streams telemetry into a run directory.
pub struct TelemetryWriter {
    metrics: BufWriter<File>,
    freezes: BufWriter<File>,
    csv: csv::Writer<File>,
    components: Vec<ComponentId>,
}

fn observer_error(e: impl std::fmt::Display) -> CoreError {
    CoreError::Observer(e.to_string())
}

impl TelemetryWriter {
    /// Creates the three files in `dir`. `components` fixes the CSV metric
    /// columns.
    pub fn create(dir: &Path, components: &[ComponentId]) -> Result<Self> {
        let open = |name: &str| -> Result<File> {
            let p = dir.join(name);
            File::create(&p).with_context(|| format!("creating {}", p.display()))
        };
        let mut csv = csv::Writer::from_writer(open(METRICS_CSV_FILE)?);
        let mut header: Vec<String> = [
            "step",
            "train_loss",
            "lr",
            "frozen_count",
            "forward_flops",
            "backward_flops",
            "update_flops",
            "val_flops",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(components.iter().map(|c| c.to_string()));
        csv.write_record(&header)?;
        Ok(Self {
            metrics: BufWriter::new(open(METRICS_FILE)?),
            freezes: BufWriter::new(open(FREEZE_LOG_FILE)?),
            csv,
            components: components.to_vec(),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush()?;
        self.freezes.flush()?;
        self.csv.flush()?;
        Ok(())
    }

    fn write_line(
        out: &mut BufWriter<File>,
        value: &impl Serialize,
    ) -> std::result::Result<(), CoreError> {
        serde_json::to_writer(&mut *out, value).map_err(observer_error)?;
        out.write_all(b"\n").map_err(observer_error)
    }
}

fn names(ids: &[ComponentId]) -> Vec<String> {
    ids.iter().map(ComponentId::to_string).collect()
}

impl<T> RunObserver<T> for TelemetryWriter {
    fn on_step(
        &mut self,
        r: &MetricsRecord,
        _view: &StepView<'_, T>,
    ) -> grades_core::error::Result<()> {
        let line = StepLine {
            schema_version: SCHEMA_VERSION,
            kind: "step",
            step: r.step,
            train_loss: r.train_loss,
            lr: r.lr,
            metrics: ComponentMap(&r.metrics),
            newly_frozen: names(&r.newly_frozen),
            frozen_count: r.frozen_count,
            frozen_over_tau: names(&r.frozen_over_tau),
            flops: r.flops,
            wall_time_ms: r.wall_time_ms,
        };
        Self::write_line(&mut self.metrics, &line)?;

        let mut row = vec![
            r.step.to_string(),
            r.train_loss.to_string(),
            r.lr.to_string(),
            r.frozen_count.to_string(),
            r.flops.forward.to_string(),
            r.flops.backward.to_string(),
            r.flops.update.to_string(),
            r.flops.val.to_string(),
        ];
        row.extend(self.components.iter().map(|c| {
            r.metrics
                .iter()
                .find(|(id, _)| id == c)
                .map(|(_, v)| v.to_string())
                .unwrap_or_default()
        }));
        self.csv.write_record(&row).map_err(observer_error)
    }

    fn on_freeze(&mut self, e: &FreezeEvent) -> grades_core::error::Result<()> {
        Self::write_line(&mut self.freezes, &FreezeLine::from(e))
    }

    fn on_val_check(&mut self, c: &ValCheck) -> grades_core::error::Result<()> {
        let line = ValLine {
            schema_version: SCHEMA_VERSION,
            kind: "val_check",
            step: c.step,
            val_loss: c.val_loss,
            best_val_loss: c.best_val_loss,
            improved: c.improved,
            checks_since_improvement: c.checks_since_improvement,
            stop: c.stop,
        };
        Self::write_line(&mut self.metrics, &line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_line_round_trips() {
        let e = FreezeEvent {
            step: 12,
            component: ComponentId::new(1, Role::Gate),
            metric: 0.25,
            tau: 0.5,
        };
        let text = serde_json::to_string(&FreezeLine::from(&e)).unwrap();
        assert_eq!(
            text,
            r#"{"schema_version":1,"step":12,"layer":1,"role":"Gate","metric":0.25,"tau":0.5}"#
        );
        let back: FreezeLine = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_event(), e);
    }

    #[test]
    fn metrics_object_uses_component_names() {
        let pairs = [
            (ComponentId::new(0, Role::Q), 1.5),
            (ComponentId::new(2, Role::Down), 0.0),
        ];
        let text = serde_json::to_string(&ComponentMap(&pairs)).unwrap();
        assert_eq!(text, r#"{"L0.Q":1.5,"L2.Down":0.0}"#);
    }
}
