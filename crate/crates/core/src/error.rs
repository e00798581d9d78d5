//! Error types shared across the crate.

use crate::types::DocId;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the context-reuse engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("context is empty")]
    EmptyContext,

    #[error("duplicate document {0} in context")]
    DuplicateDoc(DocId),

    #[error("missing token count for document {0}")]
    MissingTokenCount(DocId),

    #[error("token count for document {0} must be positive")]
    NonPositiveTokenCount(DocId),

    #[error("alpha {0} outside the supported band [0.001, 0.01]")]
    AlphaOutOfRange(f64),

    #[error("need at least {expected} contexts, got {got}")]
    TooFewContexts { expected: usize, got: usize },

    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: Vec<usize>, reason: String },

    #[error("unknown session {0:?}")]
    UnknownSession(String),

    #[error("session {0:?} has no completed first turn")]
    SessionNotReady(String),

    #[error(
        "request needs {needed} tokens but cache capacity is {capacity} ({shortfall} tokens short)"
    )]
    OverCapacity {
        needed: u64,
        capacity: u64,
        shortfall: u64,
    },

    #[error("no prefill reports given")]
    NoReports,

    #[error("infeasible workload spec: {0}")]
    InfeasibleSpec(String),

    #[error("trace parse error at line {line}: {reason}")]
    TraceParse { line: usize, reason: String },

    #[error("trace validation failed for session {session:?} turn {turn}: {reason}")]
    TraceValidation {
        session: String,
        turn: u32,
        reason: String,
    },

    #[error("order hint requires a non-empty, duplicate-free document list")]
    BadHintInput,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid_path(path: &crate::types::SearchPath, reason: impl Into<String>) -> Self {
        Error::InvalidPath {
            path: path.steps.clone(),
            reason: reason.into(),
        }
    }
}
