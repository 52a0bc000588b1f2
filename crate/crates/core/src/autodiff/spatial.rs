//! Ops over `[H, W, C]` feature maps.

use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;
use crate::wavelet::{haar_analysis, haar_synthesis};

fn expect_hwc(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match shape {
        [h, w, c] => Ok([*h, *w, *c]),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Geometry of a square-kernel convolution over an HWC map.
#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut cols = vec![0.0; self.ho * self.wo * patch];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * patch..][..patch];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        let dst = (ky * self.k + kx) * self.cin;
                        row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut x = vec![0.0; self.h * self.w * self.cin];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * patch..][..patch];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        let src = (ky * self.k + kx) * self.cin;
                        x[dst..dst + self.cin]
                            .iter_mut()
                            .zip(&row[src..src + self.cin])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        x
    }
}

/// Bilinear source taps for doubling a length-`n` axis (half-pixel centers).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

impl<'t> Var<'t> {
    /// Dense 2D convolution of an `[H, W, Cin]` map with `w: [k, k, Cin, Cout]`
    /// and zero padding.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let wv = weight.value();
        let [h, w, cin] = expect_hwc(x.shape(), "conv2d")?;
        let (k, cout) = match wv.shape() {
            [k, k2, ci, co] if k == k2 && *ci == cin => (*k, *co),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: wv.shape().to_vec(),
                })
            }
        };
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let rows = geom.ho * geom.wo;
        let patch = geom.patch();
        let cols = geom.im2col(x.data());
        let mut out = vec![0.0; rows * cout];
        if let Some(bv) = &bv {
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bv.data());
            }
        }
        gemm(rows, patch, cout, &cols, false, wv.data(), false, &mut out, bv.is_some());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let out = Tensor::from_parts(vec![geom.ho, geom.wo, cout], out);
        Ok(self.tape.push(out, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gcols = vec![0.0; rows * patch];
                gemm(rows, cout, patch, g, false, wv.data(), true, &mut gcols, false);
                geom.col2im(&gcols)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; patch * cout];
                gemm(patch, rows, cout, &cols, true, g, false, &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Depthwise 3×3 convolution with zero padding 1; `w: [3, 3, C]`.
    pub fn dwconv3x3(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = weight.value();
        let [h, w, c] = expect_hwc(x.shape(), "dwconv3x3")?;
        if wv.shape() != [3, 3, c] {
            return Err(Error::ShapeMismatch {
                op: "dwconv3x3",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let bv = bias.map(|b| b.value());
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * c..][..c];
                if let Some(bv) = &bv {
                    o.copy_from_slice(bv.data());
                }
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &x.data()[(iy as usize * w + ix as usize) * c..][..c];
                        let kw = &wv.data()[(ky * 3 + kx) * c..][..c];
                        for ((o, s), k) in o.iter_mut().zip(src).zip(kw) {
                            *o += s * k;
                        }
                    }
                }
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![h, w, c], out), &parents, move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; h * w * c]);
                let mut gw = needs[1].then(|| vec![0.0; 9 * c]);
                for y in 0..h {
                    for xx in 0..w {
                        let go = &g[(y * w + xx) * c..][..c];
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let off = (iy as usize * w + ix as usize) * c;
                                let kw = (ky * 3 + kx) * c;
                                if let Some(gx) = gx.as_mut() {
                                    let kv = &wv.data()[kw..kw + c];
                                    for ((d, gi), k) in gx[off..off + c].iter_mut().zip(go).zip(kv) {
                                        *d += gi * k;
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let src = &x.data()[off..off + c];
                                    for ((d, gi), s) in gw[kw..kw + c].iter_mut().zip(go).zip(src) {
                                        *d += gi * s;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![0.0; c];
                        for row in g.chunks_exact(c) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        gb
                    }));
                }
                grads
            }))
    }

    /// Bilinear 2× upsampling with half-pixel centers (`align_corners = false`).
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let [h, w, c] = expect_hwc(x.shape(), "upsample2x")?;
        let ty = Rc::new(upsample_taps(h));
        let tx = Rc::new(upsample_taps(w));
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; h2 * w2 * c];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let o = &mut out[(oy * w2 + ox) * c..][..c];
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wt = wy * wx;
                        if wt == 0.0 {
                            continue;
                        }
                        let src = &x.data()[(yy * w + xx) * c..][..c];
                        o.iter_mut().zip(src).for_each(|(a, b)| *a += wt * b);
                    }
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![h2, w2, c], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; h * w * c];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let go = &g[(oy * w2 + ox) * c..][..c];
                        for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                            for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                                let wt = wy * wx;
                                if wt == 0.0 {
                                    continue;
                                }
                                gx[(yy * w + xx) * c..][..c]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(a, b)| *a += wt * b);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// One-level orthonormal Haar analysis, packed as `[H/2, W/2, 4C]` with
    /// channel blocks `[c_A | c_H | c_V | c_D]`.
    pub fn dwt2(self) -> Result<Var<'t>> {
        let x = self.value();
        let [h, w, c] = expect_hwc(x.shape(), "dwt2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddDimensions {
                height: h,
                width: w,
            });
        }
        let out = haar_analysis(x.data(), h, w, c);
        // The analysis matrix is orthogonal and symmetric, so its adjoint is
        // the synthesis.
        Ok(self.tape.push(
            Tensor::from_parts(vec![h / 2, w / 2, 4 * c], out),
            &[self],
            move |g, _| vec![Some(haar_synthesis(g, h / 2, w / 2, c))],
        ))
    }

    /// Inverse of [`Var::dwt2`] on a packed `[h, w, 4C]` input.
    pub fn iwt2(self) -> Result<Var<'t>> {
        let x = self.value();
        let [h, w, c4] = expect_hwc(x.shape(), "iwt2")?;
        if c4 % 4 != 0 {
            return Err(Error::ShapeMismatch {
                op: "iwt2",
                lhs: x.shape().to_vec(),
                rhs: vec![4],
            });
        }
        let c = c4 / 4;
        let out = haar_synthesis(x.data(), h, w, c);
        Ok(self.tape.push(
            Tensor::from_parts(vec![2 * h, 2 * w, c], out),
            &[self],
            move |g, _| vec![Some(haar_analysis(g, 2 * h, 2 * w, c))],
        ))
    }

    /// Keep every `stride`-th pixel in both spatial axes.
    pub fn subsample(self, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [h, w, c] = expect_hwc(x.shape(), "subsample")?;
        if stride <= 1 {
            return Ok(self);
        }
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let mut out = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((oy * stride) * w + ox * stride) * c;
                out.extend_from_slice(&x.data()[src..src + c]);
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![ho, wo, c], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; h * w * c];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let dst = ((oy * stride) * w + ox * stride) * c;
                        gx[dst..dst + c].copy_from_slice(&g[(oy * wo + ox) * c..][..c]);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mirror-pad at the bottom and right edges without repeating the edge
    /// pixel. Each pad must be smaller than the corresponding dimension.
    pub fn pad_reflect(self, bottom: usize, right: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [h, w, c] = expect_hwc(x.shape(), "pad_reflect")?;
        if (bottom > 0 && bottom >= h) || (right > 0 && right >= w) {
            return Err(Error::ShapeMismatch {
                op: "pad_reflect",
                lhs: x.shape().to_vec(),
                rhs: vec![bottom, right],
            });
        }
        let (h2, w2) = (h + bottom, w + right);
        let mut out = Vec::with_capacity(h2 * w2 * c);
        for y in 0..h2 {
            let sy = reflect_index(y, h);
            for xx in 0..w2 {
                let sx = reflect_index(xx, w);
                out.extend_from_slice(&x.data()[(sy * w + sx) * c..][..c]);
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![h2, w2, c], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; h * w * c];
                for y in 0..h2 {
                    let sy = reflect_index(y, h);
                    for xx in 0..w2 {
                        let sx = reflect_index(xx, w);
                        gx[(sy * w + sx) * c..][..c]
                            .iter_mut()
                            .zip(&g[(y * w2 + xx) * c..][..c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Spatial window `[top..top+height, left..left+width]`.
    pub fn crop(self, top: usize, left: usize, height: usize, width: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [h, w, c] = expect_hwc(x.shape(), "crop")?;
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                op: "crop",
                lhs: x.shape().to_vec(),
                rhs: vec![top, left, height, width],
            });
        }
        let mut out = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            out.extend_from_slice(&x.data()[(y * w + left) * c..][..width * c]);
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![height, width, c], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; h * w * c];
                for y in 0..height {
                    gx[((top + y) * w + left) * c..][..width * c]
                        .copy_from_slice(&g[y * width * c..][..width * c]);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Per-channel separable filter with the same 1D kernel on both axes,
    /// keeping only fully covered ("valid") positions.
    pub fn filter_separable_valid(self, kernel: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        let [h, w, c] = expect_hwc(x.shape(), "filter_separable_valid")?;
        let k = kernel.len();
        if k == 0 || k > h || k > w {
            return Err(Error::ShapeMismatch {
                op: "filter_separable_valid",
                lhs: x.shape().to_vec(),
                rhs: vec![k, k],
            });
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let kern = Rc::new(kernel.to_vec());
        // Horizontal pass: [h, wo, c], then vertical: [ho, wo, c].
        let mut tmp = vec![0.0; h * wo * c];
        for y in 0..h {
            for ox in 0..wo {
                let dst = &mut tmp[(y * wo + ox) * c..][..c];
                for (t, &kv) in kern.iter().enumerate() {
                    let src = &x.data()[(y * w + ox + t) * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += kv * b);
                }
            }
        }
        let mut out = vec![0.0; ho * wo * c];
        for oy in 0..ho {
            for (t, &kv) in kern.iter().enumerate() {
                let src = &tmp[(oy + t) * wo * c..][..wo * c];
                out[oy * wo * c..][..wo * c]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += kv * b);
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![ho, wo, c], out),
            &[self],
            move |g, _| {
                let mut gtmp = vec![0.0; h * wo * c];
                for oy in 0..ho {
                    for (t, &kv) in kern.iter().enumerate() {
                        gtmp[(oy + t) * wo * c..][..wo * c]
                            .iter_mut()
                            .zip(&g[oy * wo * c..][..wo * c])
                            .for_each(|(a, b)| *a += kv * b);
                    }
                }
                let mut gx = vec![0.0; h * w * c];
                for y in 0..h {
                    for ox in 0..wo {
                        let src = &gtmp[(y * wo + ox) * c..][..c];
                        for (t, &kv) in kern.iter().enumerate() {
                            gx[(y * w + ox + t) * c..][..c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += kv * b);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn hwc(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![h, w, c], (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn conv1x1_identity_weight_is_identity() {
        let tape = Tape::new();
        let x = hwc(3, 4, 2, |i| i as f64 * 0.3 - 1.0);
        let mut w = Tensor::zeros(&[1, 1, 2, 2]);
        w.set(&[0, 0, 0, 0], 1.0);
        w.set(&[0, 0, 1, 1], 1.0);
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w), None, 1, 0)
            .unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn dwconv_center_delta_is_identity() {
        let tape = Tape::new();
        let x = hwc(4, 5, 3, |i| (i as f64).sin());
        let mut w = Tensor::zeros(&[3, 3, 3]);
        for c in 0..3 {
            w.set(&[1, 1, c], 1.0);
        }
        let y = tape.constant(x.clone()).dwconv3x3(tape.constant(w), None).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn dwconv_box_filter_center_is_mean() {
        let tape = Tape::new();
        let x = hwc(3, 3, 1, |i| (i * i) as f64);
        let w = Tensor::full(&[3, 3, 1], 1.0 / 9.0);
        let y = tape.constant(x.clone()).dwconv3x3(tape.constant(w), None).unwrap();
        let center = y.value().at(&[1, 1, 0]);
        assert!((center - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn upsample_constant_and_ramp() {
        let tape = Tape::new();
        let y = tape
            .constant(Tensor::full(&[3, 2, 2], 0.4))
            .upsample2x()
            .unwrap();
        assert_eq!(y.shape(), vec![6, 4, 2]);
        assert!(y.value().data().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        let ramp = hwc(1, 4, 1, |i| i as f64);
        let up = tape.constant(ramp).upsample2x().unwrap().to_tensor();
        let row: Vec<f64> = (0..8).map(|i| up.at(&[0, i, 0])).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
    }

    #[test]
    fn strided_conv_output_shape() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[9, 8, 3]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 3, 5]));
        assert_eq!(x.conv2d(w, None, 2, 1).unwrap().shape(), vec![5, 4, 5]);
    }

    #[test]
    fn reflect_pad_then_crop_round_trips() {
        let tape = Tape::new();
        let x = hwc(5, 3, 2, |i| i as f64);
        let p = tape.constant(x.clone()).pad_reflect(3, 2).unwrap();
        assert_eq!(p.shape(), vec![8, 5, 2]);
        // Row 5 mirrors row 3.
        assert_eq!(p.value().at(&[5, 0, 1]), x.at(&[3, 0, 1]));
        assert_eq!(p.value().at(&[0, 4, 0]), x.at(&[0, 0, 0]));
        assert_eq!(*p.crop(0, 0, 5, 3).unwrap().value(), x);
    }

    #[test]
    fn odd_dimensions_rejected_by_dwt() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 4, 1]));
        assert!(matches!(x.dwt2(), Err(crate::Error::OddDimensions { .. })));
    }
}
