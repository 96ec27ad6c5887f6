use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("embedding format error: {0}")]
    Format(String),

    #[error("embedding file truncated in record for sentence {sentence_id}")]
    Truncated { sentence_id: u64 },

    #[error("sentence {sentence_id}: treebank has {treebank} tokens but embeddings have {embeddings}")]
    Alignment {
        sentence_id: u64,
        treebank: usize,
        embeddings: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unknown {kind} '{value}'")]
    Vocabulary { kind: &'static str, value: String },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite loss on sentence {sentence_id}")]
    NonFiniteLoss { sentence_id: u64 },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Broad class of the failure, used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Numeric(_)
            | Error::NonFiniteLoss { .. }
            | Error::Divergence { .. }
            | Error::Dimension { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}
