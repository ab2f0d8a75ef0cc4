use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure surfaced by the library.
///
/// Variants are grouped by the exit-code class they map to in the CLI:
/// usage/config problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate entity id `{0}`")]
    DuplicateId(String),

    #[error("missing required field `{field}`{}", .context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    MissingField {
        field: &'static str,
        context: Option<String>,
    },

    #[error("invalid entity `{id}`: {reason}")]
    InvalidEntity { id: String, reason: String },

    #[error("unknown entity id `{0}`")]
    UnknownEntity(String),

    #[error("empty surface form in matcher input")]
    EmptySurface,

    #[error("invalid span {start}..{end} for text of {len} chars")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("document `{doc_id}`: {message}")]
    Document { doc_id: String, message: String },

    #[error("mention skeleton needs {needed} positions but max_len is {max_len}")]
    MentionTooLong { needed: usize, max_len: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need {needed} entities with at least two mentions, found {found}")]
    InsufficientEntities { needed: usize, found: usize },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("index is empty")]
    EmptyIndex,

    #[error("reference vectors missing: {0}")]
    MissingReference(String),

    #[error("no trainable re-ranking examples: gold entity never retrieved in top {0}")]
    NoTrainableExamples(usize),

    #[error("prediction/gold count mismatch: {predictions} predictions for {gold} gold mentions")]
    Alignment { predictions: usize, gold: usize },

    #[error("prediction {position} carries {available} candidates, top-{needed} requested")]
    InsufficientCandidates {
        position: usize,
        available: usize,
        needed: usize,
    },

    #[error("bad binary format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("stage `{stage}` requires missing artifact {artifact}")]
    MissingDependency { stage: String, artifact: PathBuf },
}

/// Coarse failure class, used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::MissingDependency { .. } => ErrorClass::Usage,
            Error::NonFiniteGradient(_) | Error::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    /// Process exit code: 2 usage/config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }
}
