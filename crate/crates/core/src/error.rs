use std::path::PathBuf;

use thiserror::Error;

use crate::scorer::ScorerParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("token {token} is out of range for a vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("token {0} is not a legal action")]
    IllegalAction(u32),

    #[error("state is terminal; no transitions out of terminal states")]
    TerminalState,

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("malformed target: {0}")]
    MalformedTarget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Training produced a non-finite loss or gradient. `last_good` holds the
    /// parameters from before the failing update.
    #[error("training diverged at step {step}: {what}")]
    Diverged {
        step: usize,
        what: String,
        last_good: Box<ScorerParams>,
    },

    #[error("trajectory tree too large: {leaves} leaves exceeds limit {limit}")]
    TreeTooLarge { leaves: usize, limit: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}
