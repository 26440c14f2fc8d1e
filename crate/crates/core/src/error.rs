//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by callers that map errors to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or an invalid spec/config supplied by the caller.
    Usage,
    /// Malformed, inconsistent, or unreadable data.
    Data,
    /// Numerical failure (non-convergence, divergence, undefined value).
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("non-finite value in tensor '{name}' at index {index}")]
    NonFinite { name: String, index: usize },

    #[error("schema mismatch for parameter '{name}': {} vs {}", fmt_shape(.left), fmt_shape(.right))]
    SchemaMismatch {
        name: String,
        left: Option<Vec<usize>>,
        right: Option<Vec<usize>>,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("feature provider failed for candidate {candidate}: {message}")]
    Provider { candidate: usize, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidSpec(_) | Error::InvalidInput(_) => ErrorKind::Usage,
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Io { .. }
            | Error::Format(_)
            | Error::NonFinite { .. }
            | Error::SchemaMismatch { .. }
            | Error::Provider { .. } => ErrorKind::Data,
        }
    }
}

fn fmt_shape(shape: &Option<Vec<usize>>) -> String {
    match shape {
        Some(s) => format!("{s:?}"),
        None => "absent".to_string(),
    }
}
