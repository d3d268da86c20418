//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no ground-truth boxes to match against")]
    EmptyMatch,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training failed at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("gate expression error: {0}")]
    Gate(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code contract: 1 I/O, 2 usage/validation,
    /// 3 numeric failure, 4 gate failure (gate failures are mapped by the
    /// CLI layer, not by this type).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 1,
            Error::Training { .. } => 3,
            _ => 2,
        }
    }
}

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
