use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid {ny}x{nx} is not divisible by factor {factor}")]
    NotDivisible { ny: usize, nx: usize, factor: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grids not co-registered: {0}")]
    NotCoRegistered(String),
    #[error("variable {0} has zero variance")]
    ZeroVariance(String),
    #[error("unknown variable: {0}")]
    UnknownVariable(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u8, found: u8 },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("declared dimensions {ny}x{nx} overflow the addressable size")]
    DimensionOverflow { ny: u64, nx: u64 },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
