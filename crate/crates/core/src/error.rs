use std::io;

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::env::EnvError;
use crate::linalg::LinalgError;
use crate::oracle::OracleError;
use crate::tensor::TensorError;

/// Errors raised by training, evaluation and the command line driver.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite {what}: {detail}")]
    NonFinite { what: String, detail: String },
    #[error("skill inference failed: {0}")]
    SkillInference(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TrainError {
    /// Whether the failure is a numeric abort rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. })
    }
}
