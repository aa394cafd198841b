//! Experiment pipeline around `voxshield-core`: one TOML config per
//! experiment, one subcommand per pipeline step, JSON run manifests next to
//! every output and CSV/text comparison tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod visualize;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
