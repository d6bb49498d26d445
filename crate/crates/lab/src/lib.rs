//! Command-line harness around `grades-core`: TOML configuration, JSONL and
//! CSV telemetry, binary checkpoints, method suites and self-checks.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod runner;
pub mod telemetry;

pub use config::{LabConfig, Precision};
