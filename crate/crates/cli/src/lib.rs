//! Config-driven experiment runner: synthetic data generation, source
//! training, method comparison and reporting.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{cmd_run, cmd_synth, cmd_train_source, RunOutcome, SourceOutcome};
pub use config::{Arch, ExperimentConfig, MethodKind};
pub use error::{CliError, Result};
pub use report::cmd_report;
