//! Batch experiment runner behind the `mfgrad` binary.
//!
//! Every run reads one JSON [`config::ExperimentConfig`], writes CSV and JSON
//! files into an output directory, and finishes with a `manifest.json` that
//! lists them. Results depend only on the config and seed, never on the
//! worker count.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

pub use commands::run;
pub use config::{Command, ExperimentConfig};
pub use output::RunManifest;

/// Exit codes of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NOT_CONVERGED: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mfgrad::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mfgrad::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                E::PicardNotConverged { .. } => exit::NOT_CONVERGED,
                E::NonFiniteDrift { .. } | E::NonFiniteState { .. } => exit::NUMERIC,
                E::Io(_) | E::Csv(_) => exit::IO,
                _ => exit::CONFIG,
            },
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}
