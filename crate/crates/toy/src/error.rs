//! Error type for the toy harness.

use thiserror::Error;

use crate::train::Checkpoint;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        /// Weights from the last finite step, still usable for analysis.
        last_good: Box<Checkpoint>,
    },

    #[error(transparent)]
    Core(#[from] dtn_core::CoreError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ToyError {
    pub fn config(msg: impl Into<String>) -> Self {
        ToyError::InvalidConfig(msg.into())
    }
}
