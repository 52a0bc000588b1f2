use super::{LayerNorm, Linear};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamBuilder};
use crate::tensor::Tensor;

/// `Softmax(Q·Kᵀ / λ)·V` for `Q: [m, d]`, `K: [n, d]`, `V: [n, dv]` and a
/// single-element `λ`.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, lambda: Var<'t>) -> Result<Var<'t>> {
    attention_with_offset(q, k, v, lambda, None)
}

/// [`attention`] with `offset` added to `Q·Kᵀ` before scaling.
pub fn attention_with_offset<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    lambda: Var<'t>,
    offset: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let l = lambda.item();
    if !(l > 0.0) {
        return Err(Error::NonPositiveTemperature(l));
    }
    let mut logits = q.matmul(k.transpose()?)?;
    if let Some(off) = offset {
        logits = logits.add(off)?;
    }
    logits.div(lambda)?.softmax().matmul(v)
}

/// Learned positive temperature, stored as its logarithm.
#[derive(Clone, Debug)]
pub struct Temperature {
    log: String,
}

impl Temperature {
    pub fn new(pb: &mut ParamBuilder, name: &str, init: f64) -> Self {
        assert!(init > 0.0, "temperature must be positive");
        Self {
            log: pb.add(name, &[1], Init::Value(Tensor::scalar(init.ln()))),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>) -> Var<'t> {
        p.get(&self.log).exp()
    }
}

/// Flattens a feature map into at most `budget` tokens by strided
/// subsampling.
#[derive(Clone, Copy, Debug)]
pub struct TokenSource {
    pub budget: usize,
}

impl TokenSource {
    /// Smallest stride whose subsampled grid fits the budget.
    pub fn stride(&self, h: usize, w: usize) -> usize {
        (1..)
            .find(|s| h.div_ceil(*s) * w.div_ceil(*s) <= self.budget)
            .expect("stride search terminates once the grid is 1x1")
    }

    /// `[H, W, C]` → `[L, C]`.
    pub fn tokens<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let s = self.stride(shape[0], shape[1]);
        let sub = x.subsample(s)?;
        let sh = sub.shape();
        sub.reshape(&[sh[0] * sh[1], sh[2]])
    }
}

/// Keys and values from a feature map, attended by externally supplied
/// queries of width `C`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    wk: Linear,
    wv: Linear,
    temp: Temperature,
    source: TokenSource,
}

impl CrossAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, budget: usize) -> Self {
        let mut pb = pb.child(name);
        Self {
            wk: Linear::new(&mut pb, "wk", channels, channels, false),
            wv: Linear::new(&mut pb, "wv", channels, channels, false),
            temp: Temperature::new(&mut pb, "log_temp", (channels as f64).sqrt()),
            source: TokenSource { budget },
        }
    }

    /// `queries: [m, C]`, `features: [H, W, C]` → `[m, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, queries: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let tokens = self.source.tokens(features)?;
        let k = self.wk.forward(p, tokens)?;
        let v = self.wv.forward(p, tokens)?;
        attention(queries, k, v, self.temp.forward(p))
    }
}

/// Transposed self-attention: a `C×C` attention map over channels, computed
/// from L2-normalized (over positions) queries and keys. Pre-norm, residual.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    norm: LayerNorm,
    qkv: Linear,
    temp: Temperature,
    proj_out: Linear,
    channels: usize,
}

fn normalize_rows(x: Var<'_>) -> Result<Var<'_>> {
    x.div(x.square().sum_axis(1)?.add_scalar(1e-12).sqrt())
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let mut pb = pb.child(name);
        Self {
            norm: LayerNorm::new(&mut pb, "norm", channels),
            qkv: Linear::new(&mut pb, "qkv", channels, 3 * channels, false),
            temp: Temperature::new(&mut pb, "log_temp", 1.0),
            proj_out: Linear::output(&mut pb, "proj_out", channels, channels, false),
            channels,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let c = self.channels;
        let n = shape[0] * shape[1];
        let h = self.norm.forward(p, x)?.reshape(&[n, c])?;
        let qkv = self.qkv.forward(p, h)?;
        // Channels become the token axis: [C, HW].
        let q = normalize_rows(qkv.slice_last(0, c)?.transpose()?)?;
        let k = normalize_rows(qkv.slice_last(c, c)?.transpose()?)?;
        let v = qkv.slice_last(2 * c, c)?.transpose()?;
        let mixed = attention(q, k, v, self.temp.forward(p))?.transpose()?;
        let out = self.proj_out.forward(p, mixed)?.reshape(&shape)?;
        x.add(out)
    }
}
