//! Experiment pipeline behind the `bundleforge` binary: flat-file config,
//! checkpoints, in-memory stages and the file-backed commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run, CliError, CliResult, Command};
pub use config::ExperimentConfig;
