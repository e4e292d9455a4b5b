use ilvr_numerics::NumericsError;
use thiserror::Error;

use crate::interleave::InterleavedSequence;

#[derive(Debug, Error)]
pub enum IlvrError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("decode budget exhausted inside a latent segment")]
    Truncated { partial: Box<InterleavedSequence> },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("shape mismatch for parameter `{name}`: {left:?} vs {right:?}")]
    ParamShape {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IlvrError>;
