//! Elementwise, reduction, shape and matrix ops.

use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{broadcast_indices, broadcast_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Square,
    Silu,
    Gelu,
    Softplus,
    Sigmoid,
    Tanh,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Square => x * x,
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Ln => 1.0 / x,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Abs => x.signum() * f64::from(x != 0.0),
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryOp::Gelu => {
                let inner = GELU_K * (x + GELU_C * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Tanh => 1.0 - y * y,
        }
    }
}

/// Sum `grad` (laid out over the broadcast shape) back onto the source.
fn unbroadcast(grad: &[f64], idx: Option<&[usize]>, src_len: usize) -> Vec<f64> {
    match idx {
        None => grad.to_vec(),
        Some(idx) => {
            let mut out = vec![0.0; src_len];
            for (g, &i) in grad.iter().zip(idx) {
                out[i] += g;
            }
            out
        }
    }
}

impl<'t> Var<'t> {
    pub fn binary(self, other: Var<'t>, op: BinaryOp) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "elementwise",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let ia = (a.shape() != out_shape.as_slice())
            .then(|| Rc::new(broadcast_indices(a.shape(), &out_shape)));
        let ib = (b.shape() != out_shape.as_slice())
            .then(|| Rc::new(broadcast_indices(b.shape(), &out_shape)));
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let fetch = |idx: &Option<Rc<Vec<usize>>>, d: &[f64], i: usize| match idx {
            Some(ix) => d[ix[i]],
            None => d[i],
        };
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = fetch(&ia, ad, i);
                let y = fetch(&ib, bd, i);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.tape.push(out, &[self, other], move |g, needs| {
            let (ad, bd) = (a.data(), b.data());
            let ga = needs[0].then(|| {
                let local: Vec<f64> = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * fetch(&ib, bd, i))
                        .collect(),
                    BinaryOp::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi / fetch(&ib, bd, i))
                        .collect(),
                };
                unbroadcast(&local, ia.as_deref().map(Vec::as_slice), ad.len())
            });
            let gb = needs[1].then(|| {
                let local: Vec<f64> = match op {
                    BinaryOp::Add => g.to_vec(),
                    BinaryOp::Sub => g.iter().map(|v| -v).collect(),
                    BinaryOp::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * fetch(&ia, ad, i))
                        .collect(),
                    BinaryOp::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let y = fetch(&ib, bd, i);
                            -gi * fetch(&ia, ad, i) / (y * y)
                        })
                        .collect(),
                };
                unbroadcast(&local, ib.as_deref().map(Vec::as_slice), bd.len())
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn unary(self, op: UnaryOp) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| op.apply(v));
        let y = Rc::new(out.clone());
        self.tape.push(out, &[self], move |g, _| {
            let grad = g
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(gi, (&xi, &yi))| gi * op.derivative(xi, yi))
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryOp::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryOp::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryOp::Ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryOp::Abs)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryOp::Square)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(UnaryOp::Silu)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(UnaryOp::Gelu)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape
            .push(out, &[self], move |g, _| vec![Some(g.iter().map(|v| v * c).collect())])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape.push(out, &[self], |g, _| vec![Some(g.to_vec())])
    }

    /// Clamp to `[lo, hi]`; the gradient passes through strictly inside the
    /// interval and is zero where the value was clipped.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.clamp(lo, hi));
        self.tape.push(out, &[self], move |g, _| {
            let grad = g
                .iter()
                .zip(x.data())
                .map(|(gi, &xi)| if xi > lo && xi < hi { *gi } else { 0.0 })
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        self.tape
            .push(Tensor::scalar(x.sum()), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self
            .tape
            .push(Tensor::from_parts(out_shape, out), &[self], move |g, _| {
                let mut grad = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        grad[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(grad)]
            }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.to_tensor().reshape(shape)?;
        Ok(self.tape.push(out, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// Transpose of a 2D var.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let [r, c] = expect_2d(x.shape(), "transpose")?;
        let out = transpose_buf(x.data(), r, c);
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, r], out),
            &[self],
            move |g, _| vec![Some(transpose_buf(g, c, r))],
        ))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let [m, k] = expect_2d(a.shape(), "matmul")?;
        let [k2, n] = expect_2d(b.shape(), "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            &[self, other],
            move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Affine map over the last axis: `x · w + b` with `w: [cin, cout]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let mut shape = x.shape().to_vec();
        let cin = *shape.last().unwrap_or(&0);
        let [wi, cout] = expect_2d(wv.shape(), "linear")?;
        if wi != cin {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![cout],
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let rows = x.numel() / cin;
        let mut out = vec![0.0; rows * cout];
        if let Some(bv) = &bv {
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bv.data());
            }
        }
        gemm(rows, cin, cout, x.data(), false, wv.data(), false, &mut out, bv.is_some());
        *shape.last_mut().expect("non-empty shape") = cout;
        let mut parents = vec![self, w];
        parents.extend(b);
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, out), &parents, move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * cin];
                    gemm(rows, cout, cin, g, false, wv.data(), true, &mut gx, false);
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; cin * cout];
                    gemm(cin, rows, cout, x.data(), true, g, false, &mut gw, false);
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

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let c = *x.shape().last().expect("non-empty shape");
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Rc::new(out.clone());
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self],
            move |g, _| {
                let mut grad = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(c)
                    .zip(y.chunks_exact(c))
                    .zip(grad.chunks_exact_mut(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![Some(grad)]
            },
        )
    }

    /// Normalize over the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let c = *x.shape().last().expect("non-empty shape");
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, gamma, beta],
            move |g, needs| {
                let gamma = gv.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    let mut dh = vec![0.0; c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = gr[j] * gamma[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = scale * (c as f64 * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                    gx
                });
                let gg = needs[1].then(|| {
                    let mut gg = vec![0.0; c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    gg
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; c];
                    for gr in g.chunks_exact(c) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![gx, gg, gb]
            },
        ))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x.shape().last().expect("non-empty shape");
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_last",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = x.numel() / c;
        let mut out = Vec::with_capacity(rows * len);
        for row in x.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = len;
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, out), &[self], move |g, _| {
                let mut grad = vec![0.0; rows * c];
                for (dst, src) in grad.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![Some(grad)]
            }))
    }

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_last",
            lhs: vec![],
            rhs: vec![],
        })?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].ndim() - 1];
        for v in &values {
            if &v.shape()[..v.ndim() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(first
            .tape
            .push(Tensor::from_parts(shape, out), parts, move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let grad = need.then(|| {
                            let mut grad = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                let base = r * total + offset;
                                grad.extend_from_slice(&g[base..base + w]);
                            }
                            grad
                        });
                        offset += w;
                        grad
                    })
                    .collect()
            }))
    }
}

fn expect_2d(shape: &[usize], op: &'static str) -> Result<[usize; 2]> {
    match shape {
        [r, c] => Ok([*r, *c]),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

fn transpose_buf(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
