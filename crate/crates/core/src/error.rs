use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shape and contract violations raised while building or replaying a tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter layout mismatch: expected {expected} values, got {found}")]
    Layout { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("requested {requested} posterior samples but only {available} are available")]
    Range { requested: usize, available: usize },
    #[error("non-finite value at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("ensemble member {member} diverged: {source}")]
    MemberDiverged {
        member: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("correlation undefined: {0} series is constant")]
    UndefinedCorrelation(&'static str),
    #[error("{path}: bad {field}: {detail}")]
    Ingestion {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for numerical blow-ups, including those wrapped by an ensemble member.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::MemberDiverged { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
