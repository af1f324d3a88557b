use thiserror::Error;

use crate::losses::LossBreakdown;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    ModelConfig(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    InvalidToken { id: usize, vocab: usize },
    #[error("sequence length {len} invalid (max {max})")]
    SequenceLength { len: usize, max: usize },
    #[error("average-global representation requested without a broadcast snapshot")]
    MissingSnapshot,
    #[error("model has no private adapter")]
    NoPrivateAdapter,
    #[error("malformed parameter payload: {0}")]
    Payload(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("non-finite loss on client {client} in round {round} at step {step}")]
    NumericalAbort {
        client: usize,
        round: usize,
        step: usize,
        /// Every breakdown recorded in the local phase, the offending one last.
        history: Vec<LossBreakdown>,
    },
    #[error("client {client} failed in round {round}: {reason}")]
    ClientFailure {
        client: usize,
        round: usize,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalAbort { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
