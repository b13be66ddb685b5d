use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("id out of range: {id} (vocabulary size {vocab_size})")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,

    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("sequence too long: {len} > max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward called without a recorded forward pass")]
    NoForward,

    #[error("no alignable positions")]
    NoAlignablePositions,

    #[error("sequence too short for next-token loss: {0} tokens")]
    SequenceTooShort(usize),

    #[error("graphs not disjoint: {0}")]
    GraphsNotDisjoint(String),

    #[error("undefined cosine: zero vector")]
    UndefinedCosine,

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` is missing upstream artifact {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
