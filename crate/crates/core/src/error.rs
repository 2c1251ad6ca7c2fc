use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("inner-loop divergence at token {token}: state is no longer finite")]
    Divergence { token: usize },

    #[error("training diverged: non-finite loss in batch {batch}")]
    LossDivergence { batch: usize },

    #[error("{what}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("rotary embedding needs an even dimension, got {0}")]
    OddDimension(usize),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("evaluation segment '{0}' has no instances")]
    EmptySegment(String),

    #[error("checkpoint {path}: {kind}")]
    Checkpoint {
        path: PathBuf,
        kind: CheckpointError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("config digest mismatch (header says {expected}, config hashes to {actual})")]
    Digest { expected: String, actual: String },
    #[error("payload digest mismatch (header says {expected}, data hashes to {actual})")]
    Payload { expected: String, actual: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("file truncated")]
    Truncated,
    #[error("unexpected record: {0}")]
    Record(String),
}

impl Error {
    /// True for failures caused by numbers going bad rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::LossDivergence { .. }
        )
    }
}
