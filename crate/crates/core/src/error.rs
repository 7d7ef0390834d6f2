use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus has {0} samples, at least 3 are needed to split")]
    CorpusTooSmall(usize),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    UnknownTokenId { id: u32, vocab_size: usize },

    #[error("sequence has no non-padding position")]
    AllPadding,

    #[error("empty sequence")]
    EmptySequence,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("repository is empty")]
    EmptyRepository,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's JSON error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedRecord { .. } => "malformed_record",
            Error::EmptyCorpus | Error::CorpusTooSmall(_) => "corpus",
            Error::SequenceTooLong { .. }
            | Error::UnknownTokenId { .. }
            | Error::AllPadding
            | Error::EmptySequence => "sequence",
            Error::DimensionMismatch { .. } | Error::ShapeMismatch(_) => "shape",
            Error::EmptyRepository => "retrieval",
            Error::InvalidConfig(_) | Error::InvalidArgument(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Json(_) => "json",
        }
    }
}
