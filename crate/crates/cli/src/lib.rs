//! Experiment harness behind the `rwlab` binary: configuration, run
//! manifests, subcommands and the randomized self-checks.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::Mode;
pub use config::{ExperimentConfig, Seeds};
pub use error::{exit, CliError, CliResult};
pub use manifest::{RunManifest, RunSummary};
