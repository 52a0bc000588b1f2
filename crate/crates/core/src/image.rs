use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image as an `[H, W, 3]` tensor with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pixels: Tensor,
    source: Option<PathBuf>,
    original_size: (usize, usize),
}

impl ImageBuffer {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let (h, w) = match pixels.shape() {
            [h, w, 3] => (*h, *w),
            [h, w, _] if *h == 0 || *w == 0 => return Err(Error::EmptyImage),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "image",
                    lhs: s.to_vec(),
                    rhs: vec![3],
                })
            }
        };
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            source: None,
            original_size: (h, w),
        })
    }

    /// Build from values that may leave `[0, 1]`, clamping them.
    pub fn from_unclamped(pixels: Tensor) -> Result<Self> {
        Self::new(pixels.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn with_source(mut self, path: impl AsRef<Path>) -> Self {
        self.source = Some(path.as_ref().to_path_buf());
        self
    }

    pub fn with_original_size(mut self, size: (usize, usize)) -> Self {
        self.original_size = size;
        self
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Size before any padding, as `(height, width)`.
    pub fn original_size(&self) -> (usize, usize) {
        self.original_size
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean()
    }
}
