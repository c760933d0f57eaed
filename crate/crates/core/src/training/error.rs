use thiserror::Error;

use crate::fields::FieldError;
use crate::models::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("prediction {pred:?} is not an integer multiple of input {input:?}")]
    ScaleMismatch { pred: Vec<usize>, input: Vec<usize> },
    #[error("optimizer state does not match parameter {index}: {expected} vs {found} values")]
    StateMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Field(#[from] FieldError),
}
