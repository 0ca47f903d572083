use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {}x{} and {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },

    #[error("data length {actual} does not match shape (expected {expected})")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("duplicate entry `{0}`")]
    Duplicate(String),

    #[error("token id {id} at position {pos} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, pos: usize, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("trace does not match the model state it is used with: {0}")]
    StaleTrace(String),

    #[error("prunable set is empty")]
    EmptyPrunableSet,

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid results: {0}")]
    Results(String),

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
