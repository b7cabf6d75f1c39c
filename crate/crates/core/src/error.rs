use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid store: {0}")]
    InvalidStore(String),
    #[error("unknown record id {0}")]
    UnknownId(u64),
    #[error("insufficient anchors: need at least 2, got {0}")]
    InsufficientAnchors(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("length mismatch: {left} vs {right} ({context})")]
    LengthMismatch {
        left: usize,
        right: usize,
        context: String,
    },
    #[error("unknown sense {0:?}")]
    UnknownSense(String),
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("instance {0:?} has no gold key")]
    MissingGold(String),
    #[error("malformed input at line {line}: {message}")]
    MalformedInput { line: usize, message: String },
    #[error("degenerate contingency table (b + c = 0)")]
    DegenerateTable,
    #[error("insufficient sample: need at least 2 observations, got {0}")]
    InsufficientSample(usize),
    #[error("zero variance in both samples")]
    ZeroVariance,
    #[error("empty grid")]
    EmptyGrid,
    #[error("contradictory configuration: {0}")]
    ConfigContradiction(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: usize, actual: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected,
            actual,
            context: context.into(),
        }
    }

    pub(crate) fn lengths(left: usize, right: usize, context: impl Into<String>) -> Self {
        Error::LengthMismatch {
            left,
            right,
            context: context.into(),
        }
    }
}
