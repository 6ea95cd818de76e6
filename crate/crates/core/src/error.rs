use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rotation by {degrees} degrees needs a square xy-plane, got {height}x{width}")]
    NonSquareRotation {
        degrees: u32,
        height: usize,
        width: usize,
    },
    #[error("invalid indicator vector: {0}")]
    InvalidIndicator(String),
    #[error("paired crop sampling failed after {0} attempts")]
    CropSamplingFailed(usize),
    #[error("feature queue is empty")]
    EmptyQueue,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("beta distribution parameter must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("AUC is undefined unless both classes are present")]
    SingleClass,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::ShapeMismatch(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
