use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TupError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TupError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backend `{backend}` failed after {attempts} attempt(s): {message}")]
    Backend {
        backend: String,
        attempts: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),
}

impl TupError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TupError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        TupError::InvalidInput(msg.into())
    }

    /// Short machine-readable category, used by the CLI for its one-line error output.
    pub fn category(&self) -> &'static str {
        match self {
            TupError::Io { .. } => "io",
            TupError::Parse { .. } => "parse",
            TupError::InvalidInput(_) => "input",
            TupError::DimMismatch { .. } => "dim",
            TupError::NonFinite(_) => "numeric",
            TupError::Backend { .. } => "backend",
            TupError::Config(_) => "config",
            TupError::Format(_) => "format",
        }
    }
}

impl From<serde_json::Error> for TupError {
    fn from(e: serde_json::Error) -> Self {
        TupError::Format(e.to_string())
    }
}

impl From<csv::Error> for TupError {
    fn from(e: csv::Error) -> Self {
        TupError::Format(e.to_string())
    }
}
