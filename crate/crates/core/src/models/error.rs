use thiserror::Error;

use crate::fields::FieldError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input {dim} = {size} must be a multiple of {multiple} (patch x window)")]
    NotDivisible {
        dim: &'static str,
        size: usize,
        multiple: usize,
    },
    #[error("input has {found} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("checkpoint: unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checkpoint: truncated at offset {offset} (needed {needed} bytes)")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint: missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("checkpoint: parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: malformed header: {0}")]
    MalformedHeader(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
