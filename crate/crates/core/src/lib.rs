//! Matrix-level gradient-change early stopping for small decoder-only
//! transformers.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece of
//! the laboratory: dense matrices and norms, a tiny transformer with a
//! hand-written backward pass, low-rank adapters, the per-matrix freezing
//! controller, the validation-loss early-stopping baseline, analytic FLOPs
//! accounting, synthetic tasks, the training loop and the verification
//! checks. File formats, configuration files and the command line live in
//! the `grades-lab` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod earlystop;
pub mod error;
pub mod experiment;
pub mod flops;
pub mod grades;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod optim;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod task;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{ComponentId, GradientBundle, ModelConfig, ModelParams, Role};
pub use real::Real;
