use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("NIfTI: {0}")]
    Nifti(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("weights: {0}")]
    Weights(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl std::fmt::Display, source: csv::Error) -> Self {
        Error::Csv {
            path: path.to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Csv { source, .. } => source.is_io_error(),
            _ => false,
        }
    }
}
