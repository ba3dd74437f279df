use std::path::PathBuf;

pub type Result<T, E = DsmError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DsmError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("risk {risk} has no uncensored rows in the training data")]
    NoEvents { risk: usize },

    #[error("did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DsmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DsmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, column: impl Into<String>, message: impl Into<String>) -> Self {
        DsmError::Parse {
            line,
            column: column.into(),
            message: message.into(),
        }
    }
}
