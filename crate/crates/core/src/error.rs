use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("group count {groups} does not divide {tokens} tokens")]
    GroupCount { groups: usize, tokens: usize },

    #[error("uniform-shape contract violated: rank {rank} holds {got} tokens, rank 0 holds {expected}")]
    UniformShape { rank: usize, got: usize, expected: usize },

    #[error("invalid parallel plan: {0}")]
    InvalidPlan(String),

    #[error("base model needs {needed:.0} bytes per GPU, budget is {budget:.0}")]
    BudgetExceeded { needed: f64, budget: f64 },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("checkpoint format version {found:?}, expected {expected:?}")]
    Version { found: String, expected: &'static str },

    #[error("checkpoint blob truncated: need {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("checksum mismatch for tensor {name}")]
    Checksum { name: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
