//! Orthonormal 2D Haar wavelet transform on `[H, W, C]` tensors.
//!
//! For every 2×2 block `[a b; c d]` of a channel:
//!
//! ```text
//! c_A = (a + b + c + d) / 2      c_H = (a - b + c - d) / 2
//! c_V = (a + b - c - d) / 2      c_D = (a - b - c + d) / 2
//! ```
//!
//! The 4×4 analysis matrix is symmetric and orthogonal, so synthesis applies
//! the same matrix. Because only `c_A` has a nonzero DC response, the global
//! mean of an image equals `mean(c_A) / 2`; the detail bands carry no
//! brightness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::tensor::Tensor;

/// Wavelet family. Only Haar is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFilter {
    #[default]
    Haar,
}

/// The four subbands of one decomposition level, each `[H/2, W/2, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletSubbands {
    pub approx: Tensor,
    pub horizontal: Tensor,
    pub vertical: Tensor,
    pub diagonal: Tensor,
}

/// Which part of the spectrum [`swap_subbands`] exchanges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    /// The approximation band `c_A`.
    Low,
    /// The three detail bands.
    High,
}

impl std::str::FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lf" | "low" => Ok(Band::Low),
            "hf" | "high" => Ok(Band::High),
            other => Err(Error::InvalidConfig(format!("unknown band `{other}`"))),
        }
    }
}

/// Packed analysis: `[h, w, c]` → `[h/2, w/2, 4c]` with channel blocks
/// `[A | H | V | D]`. Dimensions must be even.
pub(crate) fn haar_analysis(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let c4 = 4 * c;
    let mut out = vec![0.0; ho * wo * c4];
    for i in 0..ho {
        for j in 0..wo {
            let r0 = (2 * i * w + 2 * j) * c;
            let r1 = ((2 * i + 1) * w + 2 * j) * c;
            let o = &mut out[(i * wo + j) * c4..][..c4];
            for ch in 0..c {
                let a = x[r0 + ch];
                let b = x[r0 + c + ch];
                let cc = x[r1 + ch];
                let d = x[r1 + c + ch];
                o[ch] = 0.5 * (a + b + cc + d);
                o[c + ch] = 0.5 * (a - b + cc - d);
                o[2 * c + ch] = 0.5 * (a + b - cc - d);
                o[3 * c + ch] = 0.5 * (a - b - cc + d);
            }
        }
    }
    out
}

/// Packed synthesis: `[h, w, 4c]` → `[2h, 2w, c]`.
pub(crate) fn haar_synthesis(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let c4 = 4 * c;
    let mut out = vec![0.0; h2 * w2 * c];
    for i in 0..h {
        for j in 0..w {
            let s = &x[(i * w + j) * c4..][..c4];
            let r0 = (2 * i * w2 + 2 * j) * c;
            let r1 = ((2 * i + 1) * w2 + 2 * j) * c;
            for ch in 0..c {
                let (ca, chh, cv, cd) = (s[ch], s[c + ch], s[2 * c + ch], s[3 * c + ch]);
                out[r0 + ch] = 0.5 * (ca + chh + cv + cd);
                out[r0 + c + ch] = 0.5 * (ca - chh + cv - cd);
                out[r1 + ch] = 0.5 * (ca + chh - cv - cd);
                out[r1 + c + ch] = 0.5 * (ca - chh - cv + cd);
            }
        }
    }
    out
}

fn hwc(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        [h, w, c] => Ok([*h, *w, *c]),
        s => Err(Error::ShapeMismatch {
            op: "wavelet",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// One analysis level. Odd dimensions are an error; callers pad first.
pub fn dwt2(img: &Tensor) -> Result<WaveletSubbands> {
    let [h, w, c] = hwc(img)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDimensions {
            height: h,
            width: w,
        });
    }
    let packed = haar_analysis(img.data(), h, w, c);
    let (ho, wo) = (h / 2, w / 2);
    let mut bands: [Vec<f64>; 4] = Default::default();
    for b in bands.iter_mut() {
        b.reserve(ho * wo * c);
    }
    for px in packed.chunks_exact(4 * c) {
        for (k, b) in bands.iter_mut().enumerate() {
            b.extend_from_slice(&px[k * c..(k + 1) * c]);
        }
    }
    let [a, hh, v, d] = bands.map(|b| Tensor::from_parts(vec![ho, wo, c], b));
    Ok(WaveletSubbands {
        approx: a,
        horizontal: hh,
        vertical: v,
        diagonal: d,
    })
}

/// Exact inverse of [`dwt2`].
pub fn iwt2(sb: &WaveletSubbands) -> Result<Tensor> {
    let shape = sb.approx.shape();
    for t in [&sb.horizontal, &sb.vertical, &sb.diagonal] {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "iwt2",
                lhs: shape.to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let [h, w, c] = hwc(&sb.approx)?;
    let mut packed = Vec::with_capacity(h * w * 4 * c);
    for p in 0..h * w {
        for t in [&sb.approx, &sb.horizontal, &sb.vertical, &sb.diagonal] {
            packed.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(
        vec![2 * h, 2 * w, c],
        haar_synthesis(&packed, h, w, c),
    ))
}

/// Multi-level decomposition: the approximation of the coarsest level plus
/// detail bands ordered from finest (level 1) to coarsest.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub approx: Tensor,
    pub details: Vec<[Tensor; 3]>,
}

/// Recursive decomposition on the approximation band.
pub fn wavedec2(img: &Tensor, levels: usize) -> Result<Decomposition> {
    let mut approx = img.clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let sb = dwt2(&approx)?;
        details.push([sb.horizontal, sb.vertical, sb.diagonal]);
        approx = sb.approx;
    }
    Ok(Decomposition { approx, details })
}

pub fn waverec2(dec: &Decomposition) -> Result<Tensor> {
    let mut approx = dec.approx.clone();
    for [h, v, d] in dec.details.iter().rev() {
        approx = iwt2(&WaveletSubbands {
            approx,
            horizontal: h.clone(),
            vertical: v.clone(),
            diagonal: d.clone(),
        })?;
    }
    Ok(approx)
}

/// Exchange one band between two equally sized images and reconstruct,
/// without clamping.
pub fn swap_subbands_raw(a: &Tensor, b: &Tensor, which: Band) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "swap_subbands",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut sa = dwt2(a)?;
    let mut sb = dwt2(b)?;
    match which {
        Band::Low => std::mem::swap(&mut sa.approx, &mut sb.approx),
        Band::High => {
            std::mem::swap(&mut sa.horizontal, &mut sb.horizontal);
            std::mem::swap(&mut sa.vertical, &mut sb.vertical);
            std::mem::swap(&mut sa.diagonal, &mut sb.diagonal);
        }
    }
    Ok((iwt2(&sa)?, iwt2(&sb)?))
}

/// [`swap_subbands_raw`] on images, with outputs clamped to `[0, 1]`.
pub fn swap_subbands(
    a: &ImageBuffer,
    b: &ImageBuffer,
    which: Band,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let (ra, rb) = swap_subbands_raw(a.pixels(), b.pixels(), which)?;
    Ok((
        ImageBuffer::from_unclamped(ra)?,
        ImageBuffer::from_unclamped(rb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_image_has_only_approximation() {
        let sb = dwt2(&Tensor::full(&[4, 6, 2], 0.3)).unwrap();
        assert!(sb.approx.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for t in [&sb.horizontal, &sb.vertical, &sb.diagonal] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hand_evaluated_block() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let sb = dwt2(&x).unwrap();
        assert_eq!(sb.approx.item(), 5.0);
        assert_eq!(sb.horizontal.item(), -1.0);
        assert_eq!(sb.vertical.item(), -2.0);
        assert_eq!(sb.diagonal.item(), 0.0);
        assert_eq!(iwt2(&sb).unwrap(), x);
    }

    #[test]
    fn subband_shapes() {
        let sb = dwt2(&Tensor::zeros(&[64, 64, 3])).unwrap();
        for t in [&sb.approx, &sb.horizontal, &sb.vertical, &sb.diagonal] {
            assert_eq!(t.shape(), &[32, 32, 3]);
        }
    }

    #[test]
    fn zero_subbands_give_zero_image() {
        let z = Tensor::zeros(&[3, 5, 2]);
        let sb = WaveletSubbands {
            approx: z.clone(),
            horizontal: z.clone(),
            vertical: z.clone(),
            diagonal: z,
        };
        assert!(iwt2(&sb).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_subbands_rejected() {
        let sb = WaveletSubbands {
            approx: Tensor::zeros(&[2, 2, 1]),
            horizontal: Tensor::zeros(&[2, 2, 1]),
            vertical: Tensor::zeros(&[2, 3, 1]),
            diagonal: Tensor::zeros(&[2, 2, 1]),
        };
        assert!(matches!(iwt2(&sb), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn odd_dimensions_are_not_padded() {
        assert!(matches!(
            dwt2(&Tensor::zeros(&[3, 4, 1])),
            Err(Error::OddDimensions { height: 3, width: 4 })
        ));
    }

    #[test]
    fn mean_lives_in_approximation() {
        let x = random(&[8, 10, 3], 4);
        let sb = dwt2(&x).unwrap();
        assert!((x.mean() - sb.approx.mean() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn multilevel_round_trip() {
        let x = random(&[16, 8, 2], 9);
        let dec = wavedec2(&x, 3).unwrap();
        assert_eq!(dec.approx.shape(), &[2, 1, 2]);
        assert_eq!(dec.details.len(), 3);
        assert!(waverec2(&dec).unwrap().max_abs_diff(&x) < 1e-12);
        assert!(wavedec2(&x, 4).is_err());
    }

    #[test]
    fn swapping_identical_images_is_identity() {
        let x = random(&[6, 6, 3], 1);
        for band in [Band::Low, Band::High] {
            let (a, b) = swap_subbands_raw(&x, &x, band).unwrap();
            assert!(a.max_abs_diff(&x) < 1e-15);
            assert!(b.max_abs_diff(&x) < 1e-15);
        }
    }
}
