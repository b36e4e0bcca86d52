use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures surfaced to the shell. The variant decides the exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config fields or file contents (exit 1).
    #[error("{0}")]
    Validation(String),

    /// Filesystem failures (exit 2).
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] anevrix_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) if e.is_io() => 2,
            CliError::Core(_) => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}
