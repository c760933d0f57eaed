use thiserror::Error;

use crate::fields::FieldError;
use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {pred} predicted values vs {truth} reference values")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("data range must be positive, got {0}")]
    InvalidRange(f64),
    #[error("grid {ny}x{nx} is smaller than the {window}x{window} SSIM window")]
    GridTooSmall { ny: usize, nx: usize, window: usize },
    #[error("fine grid {fine:?} is not an integer multiple of coarse grid {coarse:?}")]
    RatioMismatch {
        fine: (usize, usize),
        coarse: (usize, usize),
    },
    #[error("unpaired grids: {0}")]
    Unpaired(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("report line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
