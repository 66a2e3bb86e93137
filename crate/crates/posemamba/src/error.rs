use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum PoseError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("parse error in {path}: record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },
    #[error("validation error: record {record}, field {field}, index {index}: {message}")]
    Validation {
        record: usize,
        field: String,
        index: usize,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error")]
    Io(#[from] std::io::Error),
}

impl PoseError {
    /// Process exit code for the CLI: 2 for configuration/input problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PoseError::NonFinite(_) | PoseError::Alignment(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = PoseError> = std::result::Result<T, E>;
