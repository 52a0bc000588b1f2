use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("spatial dimensions must be even, got {height}x{width}")]
    OddDimensions { height: usize, width: usize },

    #[error("attention temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("unknown degradation label `{0}`")]
    UnknownLabel(String),

    #[error("image is empty")]
    EmptyImage,

    #[error("vector has zero norm")]
    ZeroVector,

    #[error("descriptor set is empty")]
    EmptyDescriptorSet,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("image {height}x{width} is smaller than crop size {crop}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        crop: usize,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
