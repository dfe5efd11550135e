use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("clicks out of order in session {session_id}: timestamp {later} precedes {earlier}")]
    Ordering { session_id: u64, earlier: i64, later: i64 },

    #[error("cannot build a vocabulary from an empty session set")]
    EmptyVocab,

    #[error("item {0} is not in the vocabulary")]
    UnknownItem(u64),

    #[error("all sessions end on the same day; cannot split")]
    DegenerateSplit,

    #[error("need at least {needed} distinct days, found {found}")]
    InsufficientDays { needed: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        diagnostics: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Index { .. } => "index",
            Error::Shape { .. } => "shape",
            Error::Parse { .. } => "parse",
            Error::Ordering { .. } => "ordering",
            Error::EmptyVocab => "empty_vocab",
            Error::UnknownItem(_) => "vocab",
            Error::DegenerateSplit => "degenerate_split",
            Error::InsufficientDays { .. } => "insufficient_days",
            Error::Empty(_) => "empty",
            Error::Numeric(_) => "numeric",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::File { .. } => "file",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
