//! Wavelet-domain multi-exposure correction with descriptor guidance.

pub mod autodiff;
pub mod blockcheck;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ecam;
pub mod edrm;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
mod linalg;
pub mod nn;
pub mod losses;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod sdgm;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
