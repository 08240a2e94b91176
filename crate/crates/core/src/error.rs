// SPDX-License-Identifier: MIT OR Apache-2.0

use milab_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("unknown hook site: {0}")]
    UnknownSite(String),

    #[error("shape mismatch at {site}: expected {expected:?}, got {got:?}")]
    SiteShape { site: String, expected: Vec<usize>, got: Vec<usize> },

    #[error("out-of-vocabulary word {0:?}")]
    UnknownWord(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("invalid hyperparameters: {0}")]
    Hyper(String),

    #[error("checkpoint magic mismatch")]
    BadMagic,

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint hash mismatch: header says {expected}, payload hashes to {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid patch: {0}")]
    Patch(String),

    #[error("mean cache has no entry for {0}")]
    MissingMean(String),

    #[error("circuit was discovered on model {circuit}, not {model}")]
    StaleCircuit { circuit: String, model: String },

    #[error("invalid circuit: {0}")]
    Circuit(String),

    #[error("model metric {0} is below the divergence floor; circuit undefined")]
    Divergent(f64),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("unknown run {0}")]
    UnknownRun(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than invalid input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFiniteLoss { .. } | Error::Divergent(_)
        )
    }
}
