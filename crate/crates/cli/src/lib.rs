//! Experiment harness around `clare-core`: configuration, checkpoints,
//! dataset files, baselines, run orchestration and reporting.

pub mod baselines;
pub mod blob;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Method};
pub use error::{CliError, CliResult};
pub use run::{run_eval, run_learn, run_pretrain, LearnOptions, RunDir};
