use std::path::Path;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit codes: a stable contract for scripts.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DIVERGED: i32 = 2;
    pub const IO: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] rwlab_core::Error),

    /// A check ran to completion and reported failures.
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use rwlab_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::CheckFailed(_) => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::Core(E::Diverged { .. } | E::Numeric(_)) => exit::DIVERGED,
            CliError::Core(E::Io(_)) => exit::IO,
            CliError::Core(_) => exit::USAGE,
        }
    }
}
