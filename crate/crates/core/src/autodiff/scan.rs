//! Input-dependent (selective) linear recurrence over a token sequence.

use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Visiting order of the tokens of a flattened `H×W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder(Rc<Vec<usize>>);

impl ScanOrder {
    pub fn new(order: Vec<usize>) -> Self {
        Self(Rc::new(order))
    }

    pub fn row_major(h: usize, w: usize) -> Self {
        Self::new((0..h * w).collect())
    }

    pub fn row_major_reversed(h: usize, w: usize) -> Self {
        Self::new((0..h * w).rev().collect())
    }

    pub fn column_major(h: usize, w: usize) -> Self {
        Self::new((0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect())
    }

    pub fn column_major_reversed(h: usize, w: usize) -> Self {
        let mut v: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
        v.reverse();
        Self::new(v)
    }

    /// The four directions used by the 2D selective scan.
    pub fn four_directions(h: usize, w: usize) -> [ScanOrder; 4] {
        [
            Self::row_major(h, w),
            Self::row_major_reversed(h, w),
            Self::column_major(h, w),
            Self::column_major_reversed(h, w),
        ]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'t> Var<'t> {
    /// Zero-initialized selective scan visiting tokens in `order`:
    ///
    /// ```text
    /// h_t = exp(Δ_t · A) ⊙ h_{t-1} + (Δ_t · B_t) · x_t
    /// y_t = ⟨C_t, h_t⟩ + D · x_t
    /// ```
    ///
    /// Shapes: `self` (x) and `delta` are `[L, E]`, `a` is `[E, N]`, `b` and
    /// `c` are `[L, N]`, `d` is `[E]`. The state is `[E, N]` per step; `B_t`
    /// and `C_t` are shared across the `E` channels. Output is `[L, E]` in
    /// token (not visiting) order.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        self,
        delta: Var<'t>,
        a: Var<'t>,
        b: Var<'t>,
        c: Var<'t>,
        d: Var<'t>,
        order: &ScanOrder,
    ) -> Result<Var<'t>> {
        let xv = self.value();
        let (dv, av, bv, cv, ddv) = (delta.value(), a.value(), b.value(), c.value(), d.value());
        let (l, e) = match xv.shape() {
            [l, e] => (*l, *e),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "selective_scan",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let n = av.shape().get(1).copied().unwrap_or(0);
        let ok = dv.shape() == [l, e]
            && av.shape() == [e, n]
            && bv.shape() == [l, n]
            && cv.shape() == [l, n]
            && ddv.shape() == [e]
            && order.len() == l;
        if !ok || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "selective_scan",
                lhs: xv.shape().to_vec(),
                rhs: av.shape().to_vec(),
            });
        }
        let order = order.clone();
        let en = e * n;
        let mut states = vec![0.0; l * en];
        let mut y = vec![0.0; l * e];
        let mut h = vec![0.0; en];
        for (s, &p) in order.as_slice().iter().enumerate() {
            let xr = &xv.data()[p * e..][..e];
            let dr = &dv.data()[p * e..][..e];
            let br = &bv.data()[p * n..][..n];
            let cr = &cv.data()[p * n..][..n];
            for ch in 0..e {
                let hr = &mut h[ch * n..][..n];
                let ar = &av.data()[ch * n..][..n];
                let drive = dr[ch] * xr[ch];
                let mut acc = ddv.data()[ch] * xr[ch];
                for k in 0..n {
                    hr[k] = (dr[ch] * ar[k]).exp() * hr[k] + drive * br[k];
                    acc += cr[k] * hr[k];
                }
                y[p * e + ch] = acc;
            }
            states[s * en..(s + 1) * en].copy_from_slice(&h);
        }
        let parents = [self, delta, a, b, c, d];
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![l, e], y), &parents, move |g, _| {
                let (x, dl, am, bm, cm, dd) =
                    (xv.data(), dv.data(), av.data(), bv.data(), cv.data(), ddv.data());
                let mut gx = vec![0.0; l * e];
                let mut gdelta = vec![0.0; l * e];
                let mut ga = vec![0.0; en];
                let mut gb = vec![0.0; l * n];
                let mut gc = vec![0.0; l * n];
                let mut gd = vec![0.0; e];
                let mut gh = vec![0.0; en];
                let zeros = vec![0.0; en];
                for (s, &p) in order.as_slice().iter().enumerate().rev() {
                    let hs = &states[s * en..(s + 1) * en];
                    let hprev = if s == 0 {
                        &zeros[..]
                    } else {
                        &states[(s - 1) * en..s * en]
                    };
                    let gy = &g[p * e..][..e];
                    let br = &bm[p * n..][..n];
                    let cr = &cm[p * n..][..n];
                    for ch in 0..e {
                        let gyc = gy[ch];
                        let xpc = x[p * e + ch];
                        let dpc = dl[p * e + ch];
                        gd[ch] += gyc * xpc;
                        let mut gxc = gyc * dd[ch];
                        let mut gdc = 0.0;
                        for k in 0..n {
                            let idx = ch * n + k;
                            gc[p * n + k] += gyc * hs[idx];
                            let ghk = gh[idx] + gyc * cr[k];
                            let akn = am[idx];
                            let abar = (dpc * akn).exp();
                            gdc += ghk * (hprev[idx] * abar * akn + br[k] * xpc);
                            ga[idx] += ghk * hprev[idx] * abar * dpc;
                            gb[p * n + k] += ghk * dpc * xpc;
                            gxc += ghk * dpc * br[k];
                            gh[idx] = ghk * abar;
                        }
                        gx[p * e + ch] += gxc;
                        gdelta[p * e + ch] += gdc;
                    }
                }
                vec![
                    Some(gx),
                    Some(gdelta),
                    Some(ga),
                    Some(gb),
                    Some(gc),
                    Some(gd),
                ]
            }))
    }
}
