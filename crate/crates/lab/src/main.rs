//! `grades-lab`: run GradES experiments from TOML configuration files.
//!
//! Training is single-threaded; `GRADES_LAB_THREADS` is accepted for
//! compatibility and ignored.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use grades_core::experiment::tau_bracket;
use grades_lab::checks::verify_all;
use grades_lab::config::{LabConfig, Precision};
use grades_lab::runner::{
    self, compare_dirs, format_table, run_one, run_suite, write_comparison, write_json,
};

#[derive(Parser)]
#[command(
    name = "grades-lab",
    version,
    about = "Matrix-level gradient early stopping lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the model, task and run seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

impl Common {
    fn load(&self) -> Result<LabConfig> {
        let cfg = LabConfig::load(&self.config)?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all six methods on one configuration and compare them.
    Suite {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical self-checks. Exits non-zero if any fails.
    Verify {
        /// Use this run instead of the built-in one for training-based checks.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the reports here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe a threshold that freezes the given fraction of components.
    BracketTau {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        probe_steps: usize,
    },
    /// Compare finished run directories; exactly one must be an FP run.
    Compare {
        dirs: Vec<PathBuf>,
        /// Directory for comparison.json and comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if std::env::var_os("GRADES_LAB_THREADS").is_some() {
        eprintln!("note: GRADES_LAB_THREADS is ignored; training is single-threaded");
    }
    match cli.command {
        Command::Run { common, out } => {
            let r = run_one(&common.load()?, common.precision, &out)?;
            if let Some(b) = &r.bracket {
                println!("tau {:.6e} (target fraction {})", b.tau, b.target_fraction);
            }
            let s = &r.summary;
            println!(
                "{} stopped ({}) after {} steps: train loss {}, {} FLOPs, {} frozen, {:.2}s",
                s.method,
                s.stop_reason.as_str(),
                s.steps_executed,
                s.final_train_loss.map_or("-".into(), |l| format!("{l:.6}")),
                s.total_flops,
                s.frozen_count,
                r.timing.wall_time_s
            );
        }
        Command::Suite { common, out } => {
            let r = run_suite(&common.load()?, common.precision, &out)?;
            let mut rows = r.rows.clone();
            for (row, t) in rows.iter_mut().zip(&r.timings) {
                row.speedup_vs_fp = t.speedup_vs_fp;
            }
            print!("{}", format_table(&rows));
        }
        Command::Verify { config, out } => {
            let cfg = config.map(|p| LabConfig::load(&p)).transpose()?;
            let reports = verify_all(cfg.as_ref().map(|c| &c.run))?;
            for r in &reports {
                println!(
                    "{} {:<28} samples {:>7}  max {:.3e}  tol {:.1e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.samples,
                    r.max_violation,
                    r.tolerance
                );
            }
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                write_json(&out.join("verify.json"), &reports)?;
            }
            if reports.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::BracketTau {
            common,
            fraction,
            probe_steps,
        } => {
            let cfg = common.load()?;
            let b = match common.precision {
                Precision::F32 => tau_bracket::<f32>(&cfg.run, fraction, probe_steps)?,
                Precision::F64 => tau_bracket::<f64>(&cfg.run, fraction, probe_steps)?,
            };
            for (id, m) in &b.metrics {
                println!("{id:<8} {m:.6e}{}", if *m < b.tau { "  below" } else { "" });
            }
            println!(
                "tau = {:e}  (steps {}..={})",
                b.tau, b.first_step, b.last_step
            );
        }
        Command::Compare { dirs, out } => {
            if dirs.is_empty() {
                bail!("compare needs at least one run directory");
            }
            let (mut rows, timings) = compare_dirs(&dirs)?;
            for row in &mut rows {
                if let Some(t) = timings.iter().find(|t| t.method == row.method) {
                    row.speedup_vs_fp = row.speedup_vs_fp.or(t.speedup_vs_fp);
                }
            }
            print!("{}", format_table(&rows));
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                write_comparison(&out, &rows)?;
                write_json(&out.join(runner::TIMING_FILE), &timings)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
