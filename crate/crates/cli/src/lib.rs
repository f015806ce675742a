//! Experiment pipeline behind the `latent-unlearn` binary: corpus
//! generation, pretraining, unlearning runs, evaluation, ablation sweeps and
//! contact sheets, all driven by one JSON config.

pub mod commands;
pub mod config;
pub mod error;
pub mod summary;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};
