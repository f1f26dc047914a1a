use thiserror::Error;

use crate::noise_codec::WeightVector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is singular or not positive definite (pivot {pivot} at row {row})")]
    SingularMatrix { row: usize, pivot: f64 },

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue})")]
    NotPsd { eigenvalue: f64 },

    #[error("basis vectors are linearly dependent")]
    DegenerateBasis,

    #[error("gradient descent did not converge after {iterations} iterations (relative residual {relative_residual:e})")]
    Convergence {
        iterations: usize,
        relative_residual: f64,
        last: Box<WeightVector>,
    },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("basis mismatch: message fingerprint {message:#018x}, local basis {local:#018x}")]
    BasisMismatch { message: u64, local: u64 },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt message: checksum {stored:#010x} != computed {computed:#010x}")]
    CorruptMessage { stored: u32, computed: u32 },

    #[error("malformed message: {0}")]
    MalformedMessage(String),

    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    FrameTooLarge(u64),

    #[error("stream ended in the middle of a frame")]
    TruncatedFrame,

    #[error("transport closed")]
    Closed,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
