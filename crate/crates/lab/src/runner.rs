//! Runs configurations and writes their artifacts.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `metrics.jsonl`, `freeze_log.jsonl`, `metrics.csv`, `summary.json`,
//! `checkpoint.bin` and `timing.json`. Everything except `timing.json` is a
//! pure function of the configuration and precision.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use grades_core::experiment::{
    compare_runs, tau_bracket, ComparisonRow, Experiment, Method, RunSummary, TauBracket,
};
use grades_core::real::Real;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{LabConfig, Precision};
use crate::telemetry::TelemetryWriter;

pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

/// Wall-clock sidecar, kept apart from the deterministic artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
    pub steps_executed: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub timing: Timing,
    pub bracket: Option<TauBracket>,
}

/// Dispatches on precision.
macro_rules! typed {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Replaces the bracket section by a concrete threshold. Configurations
/// without a bracket or for methods without GradES are returned as is.
pub fn resolve_tau(
    cfg: &LabConfig,
    precision: Precision,
) -> Result<(LabConfig, Option<TauBracket>)> {
    let Some(b) = cfg.bracket.filter(|_| cfg.run.method.uses_grades()) else {
        return Ok((cfg.clone(), None));
    };
    let probe = typed!(
        precision,
        tau_bracket(&cfg.run, b.target_fraction, b.probe_steps)
    )?;
    let mut out = cfg.clone();
    out.bracket = None;
    set_tau(&mut out, probe.tau);
    Ok((out, Some(probe)))
}

fn set_tau(cfg: &mut LabConfig, tau: f64) {
    let run = &mut cfg.run;
    match (run.method.is_lora(), run.lora.as_mut()) {
        (true, Some(l)) => l.tau_r = Some(tau),
        _ => {
            if let Some(g) = run.grades.as_mut() {
                g.tau = tau;
            }
        }
    }
}

/// Runs one configuration into `out`, creating the directory.
pub fn run_one(cfg: &LabConfig, precision: Precision, out: &Path) -> Result<RunResult> {
    typed!(precision, run_typed(cfg, precision, out))
}

fn run_typed<T: Real>(cfg: &LabConfig, precision: Precision, out: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (resolved, bracket) = resolve_tau(cfg, precision)?;
    std::fs::write(out.join(CONFIG_FILE), resolved.to_toml()?)?;

    let start = Instant::now();
    let mut exp = Experiment::<T>::new(&resolved.run)?;
    if resolved.run.record_wall_time {
        let t0 = start;
        exp = exp.with_clock(move || t0.elapsed().as_secs_f64() * 1e3);
    }
    let components = exp.components();
    let mut telemetry = TelemetryWriter::create(out, &components)?;
    let outcome = exp.run(&mut telemetry)?;
    telemetry.finish()?;
    let wall = start.elapsed().as_secs_f64();

    let mut summary = outcome.summary;
    if resolved.run.record_wall_time {
        summary.wall_time_s = Some(wall);
    }
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Checkpoint::capture(
        &outcome.params,
        outcome.adapters.as_ref(),
        summary.steps_executed as u64,
    )
    .save(&out.join(CHECKPOINT_FILE))?;
    let timing = Timing {
        wall_time_s: wall,
        steps_executed: summary.steps_executed,
    };
    write_json(&out.join(TIMING_FILE), &timing)?;
    Ok(RunResult {
        dir: out.to_path_buf(),
        summary,
        timing,
        bracket,
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Per-method wall time next to the FP baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub wall_time_s: f64,
    pub speedup_vs_fp: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub runs: Vec<RunResult>,
    pub rows: Vec<ComparisonRow>,
    pub timings: Vec<TimingRow>,
}

/// Runs every method on the same configuration, each into `out/<method>`,
/// and writes `comparison.json`, `comparison.csv` and `timing.json` into
/// `out`.
pub fn run_suite(cfg: &LabConfig, precision: Precision, out: &Path) -> Result<SuiteResult> {
    let mut runs = Vec::new();
    for m in Method::ALL {
        let c = LabConfig {
            run: cfg.run.with_method(m),
            ..cfg.clone()
        };
        runs.push(run_one(&c, precision, &out.join(m.as_str()))?);
    }
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let rows = compare_runs(&summaries)?;
    for (run, row) in runs.iter_mut().zip(&rows) {
        run.summary.flops_ratio_vs_fp = Some(row.flops_ratio_vs_fp);
        run.summary.speedup_vs_fp = row.speedup_vs_fp;
        write_json(&run.dir.join(SUMMARY_FILE), &run.summary)?;
    }
    let timings = timing_rows(
        &runs
            .iter()
            .map(|r| (r.summary.method, r.timing))
            .collect::<Vec<_>>(),
    );
    write_comparison(out, &rows)?;
    write_json(&out.join(TIMING_FILE), &timings)?;
    Ok(SuiteResult {
        runs,
        rows,
        timings,
    })
}

fn timing_rows(t: &[(Method, Timing)]) -> Vec<TimingRow> {
    let fp = t
        .iter()
        .find(|(m, _)| *m == Method::Fp)
        .map(|(_, t)| t.wall_time_s);
    t.iter()
        .map(|&(method, timing)| TimingRow {
            method,
            wall_time_s: timing.wall_time_s,
            speedup_vs_fp: fp
                .filter(|_| timing.wall_time_s > 0.0)
                .map(|f| f / timing.wall_time_s),
        })
        .collect()
}

pub fn write_comparison(out: &Path, rows: &[ComparisonRow]) -> Result<()> {
    write_json(&out.join("comparison.json"), &rows)?;
    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    w.write_record([
        "method",
        "steps_executed",
        "stop_reason",
        "total_flops",
        "flops_ratio_vs_fp",
        "final_train_loss",
        "final_val_loss",
        "frozen_count",
        "wall_time_s",
        "speedup_vs_fp",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.steps_executed.to_string(),
            r.stop_reason.as_str().to_string(),
            r.total_flops.to_string(),
            r.flops_ratio_vs_fp.to_string(),
            opt(r.final_train_loss),
            opt(r.final_val_loss),
            r.frozen_count.to_string(),
            opt(r.wall_time_s),
            opt(r.speedup_vs_fp),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Compares finished run directories. Wall times missing from a summary are
/// taken from its `timing.json` when present.
pub fn compare_dirs(dirs: &[PathBuf]) -> Result<(Vec<ComparisonRow>, Vec<TimingRow>)> {
    let mut summaries = Vec::new();
    let mut timings = Vec::new();
    for d in dirs {
        let mut s: RunSummary = read_json(&d.join(SUMMARY_FILE))?;
        let timing = d.join(TIMING_FILE);
        if timing.exists() {
            let t: Timing = read_json(&timing)?;
            s.wall_time_s.get_or_insert(t.wall_time_s);
            timings.push((s.method, t));
        }
        summaries.push(s);
    }
    Ok((compare_runs(&summaries)?, timing_rows(&timings)))
}

/// Plain-text table for terminals.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!(
        "{:<12} {:>7} {:<14} {:>16} {:>9} {:>11} {:>11} {:>7} {:>8}\n",
        "method",
        "steps",
        "stop",
        "total_flops",
        "ratio",
        "train_loss",
        "val_loss",
        "frozen",
        "speedup"
    );
    let loss = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>7} {:<14} {:>16} {:>9.4} {:>11} {:>11} {:>7} {:>8}\n",
            r.method.as_str(),
            r.steps_executed,
            r.stop_reason.as_str(),
            r.total_flops,
            r.flops_ratio_vs_fp,
            loss(r.final_train_loss),
            loss(r.final_val_loss),
            r.frozen_count,
            r.speedup_vs_fp
                .map_or("-".to_string(), |x| format!("{x:.2}x")),
        ));
    }
    s
}
