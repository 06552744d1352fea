use thiserror::Error;

use crate::attention::HeadId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("head {head} out of range (model has {layers} layers x {heads} heads)")]
    HeadOutOfRange {
        head: HeadId,
        layers: usize,
        heads: usize,
    },

    #[error("invalid class id {0}")]
    InvalidClass(usize),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("sampler state became non-finite at step {step}")]
    NonFiniteSample { step: usize },

    #[error(transparent)]
    Checkpoint(#[from] crate::io::checkpoint::CheckpointError),

    #[error("malformed selection document: {0}")]
    Selection(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics (divergence, NaN/Inf) rather than
    /// bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::Diverged { .. } | Error::NonFiniteSample { .. }
        )
    }
}
