use thiserror::Error;

use downscale::evaluation::EvalError;
use downscale::fields::FieldError;
use downscale::models::ModelError;
use downscale::tensor::TensorError;
use downscale::training::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("config key {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("{0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 0 success, 1 usage/config, 2 numerical failure, 3 I/O or file format.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::UnknownKey { .. } | CliError::BadValue { .. } => 1,
            CliError::Numerical(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Field(e) => field_code(e),
            CliError::Model(e) => model_code(e),
            CliError::Train(e) => match e {
                TrainError::NonFinite { .. } => 2,
                TrainError::Field(f) => field_code(f),
                TrainError::Model(m) => model_code(m),
                _ => 1,
            },
            CliError::Eval(e) => match e {
                EvalError::Io(_) => 3,
                EvalError::Field(f) => field_code(f),
                EvalError::Model(m) => model_code(m),
                _ => 1,
            },
            CliError::Tensor(TensorError::NonFinite { .. }) => 2,
            CliError::Tensor(_) => 1,
        }
    }
}

fn field_code(e: &FieldError) -> i32 {
    match e {
        FieldError::BadMagic { .. }
        | FieldError::VersionMismatch { .. }
        | FieldError::Truncated { .. }
        | FieldError::DimensionOverflow { .. }
        | FieldError::Malformed(_)
        | FieldError::Io(_) => 3,
        _ => 1,
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::BadMagic { .. }
        | ModelError::VersionMismatch { .. }
        | ModelError::Truncated { .. }
        | ModelError::MissingParam(_)
        | ModelError::UnexpectedParam(_)
        | ModelError::ParamShape { .. }
        | ModelError::MalformedHeader(_)
        | ModelError::Io(_) => 3,
        ModelError::Field(f) => field_code(f),
        ModelError::Tensor(TensorError::NonFinite { .. }) => 2,
        _ => 1,
    }
}
