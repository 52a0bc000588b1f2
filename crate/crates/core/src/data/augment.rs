use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub crop_size: usize,
    pub stride: usize,
    /// Also draw a horizontal flip after the rotation.
    pub flip: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            stride: 32,
            flip: true,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "crop size must be even and positive, got {}",
                self.crop_size
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("crop stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Top-left corners on the stride grid, row-major.
pub fn crop_origins(height: usize, width: usize, cfg: &CropConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    if height < cfg.crop_size || width < cfg.crop_size {
        return Err(Error::ImageTooSmall {
            height,
            width,
            crop: cfg.crop_size,
        });
    }
    let ys = (0..=height - cfg.crop_size).step_by(cfg.stride);
    Ok(ys
        .flat_map(|y| (0..=width - cfg.crop_size).step_by(cfg.stride).map(move |x| (y, x)))
        .collect())
}

/// Counter-clockwise rotation by `rot`·90°, followed by a horizontal flip
/// when `flip` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn new(rot: u8, flip: bool) -> Self {
        Self { rot: rot % 4, flip }
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(|i| Dihedral::new(i % 4, i >= 4))
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            // Reflections are involutions.
            self
        } else {
            Self::new(4 - self.rot, false)
        }
    }

    /// `self` applied after `first`.
    pub fn compose(self, first: Dihedral) -> Self {
        // With T = F^f R^r and R F = F R^-1:
        // F^g R^s F R^r = F^(g+1) R^(r-s).
        if first.flip {
            Self::new(first.rot + 4 - self.rot, !self.flip)
        } else {
            Self::new(self.rot + first.rot, self.flip)
        }
    }

    /// Apply to an `[H, W, C]` tensor.
    pub fn apply(self, x: &Tensor) -> Tensor {
        let (h, w, c) = match *x.shape() {
            [h, w, c] => (h, w, c),
            _ => panic!("dihedral transform expects [H, W, C], got {:?}", x.shape()),
        };
        let (oh, ow) = if self.rot % 2 == 1 { (w, h) } else { (h, w) };
        let src = x.data();
        let mut out = Vec::with_capacity(src.len());
        for y in 0..oh {
            for xo in 0..ow {
                let xr = if self.flip { ow - 1 - xo } else { xo };
                // Pull back through the rotation.
                let (sy, sx) = match self.rot % 4 {
                    0 => (y, xr),
                    1 => (xr, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - xr),
                    _ => (h - 1 - xr, y),
                };
                let base = (sy * w + sx) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
        Tensor::new(vec![oh, ow, c], out).expect("sizes preserved")
    }
}

fn crop(x: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (w, c) = (x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(size * size * c);
    for y in top..top + size {
        let base = (y * w + left) * c;
        out.extend_from_slice(&x.data()[base..base + size * c]);
    }
    Tensor::new(vec![size, size, c], out).expect("crop in bounds")
}

/// Pick a stride-grid crop and one dihedral element at random and apply
/// both identically to the input and its ground truth.
pub fn crop_and_augment<R: Rng + ?Sized>(
    img: &ImageBuffer,
    gt: &ImageBuffer,
    cfg: &CropConfig,
    rng: &mut R,
) -> Result<(ImageBuffer, ImageBuffer)> {
    if img.pixels().shape() != gt.pixels().shape() {
        return Err(Error::ShapeMismatch {
            op: "crop_and_augment",
            lhs: img.pixels().shape().to_vec(),
            rhs: gt.pixels().shape().to_vec(),
        });
    }
    let origins = crop_origins(img.height(), img.width(), cfg)?;
    let (top, left) = origins[rng.gen_range(0..origins.len())];
    let t = Dihedral::new(rng.gen_range(0..4), cfg.flip && rng.gen_bool(0.5));
    let go = |b: &ImageBuffer| ImageBuffer::new(t.apply(&crop(b.pixels(), top, left, cfg.crop_size)));
    Ok((go(img)?, go(gt)?))
}
