use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoclError>;

#[derive(Debug, Error)]
pub enum CoclError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl CoclError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoclError::Shape(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CoclError::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CoclError::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoclError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoclError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoclError::Numeric(_) => 2,
            _ => 1,
        }
    }
}
