//! Two-stage restoration block: illumination restoration on the wavelet
//! low-frequency band, then detail reconstruction guided by the
//! high-frequency bands.

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{BlockConfig, CrossAttention, DwConv3, Gffn, LayerNorm, Linear, Ss2d};
use crate::params::{Bound, ParamBuilder};

/// Illumination restoration stage.
///
/// With `X^L, X^H = dwt(x)`:
///
/// ```text
/// X1 = LN(SS2D(SiLU(DWConv(Linear_{C→eC}(X^L)))))      SS2D projects eC → C
/// X2 = X1 + X^L + Linear(X^L)
/// x_en = iwt(GFFN(X2), X^H + Conv1x1(X^H))
/// ```
///
/// The two skip terms make every learned branch a delta around the
/// identity, so zeroed output projections reconstruct `x` exactly.
#[derive(Clone, Debug)]
pub struct Irs {
    lin_in: Linear,
    dw: DwConv3,
    ss2d: Ss2d,
    norm: LayerNorm,
    lin_res: Linear,
    gffn: Gffn,
    hf_conv: Linear,
    channels: usize,
}

impl Irs {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, cfg: &BlockConfig) -> Self {
        let mut pb = pb.child(name);
        let hidden = cfg.hidden(channels);
        Self {
            lin_in: Linear::new(&mut pb, "lin_in", channels, hidden, true),
            dw: DwConv3::new(&mut pb, "dw", hidden),
            ss2d: Ss2d::new(&mut pb, "ss2d", hidden, channels, cfg.state_dim),
            norm: LayerNorm::new(&mut pb, "norm", channels),
            lin_res: Linear::output(&mut pb, "lin_res", channels, channels, true),
            gffn: Gffn::new(&mut pb, "gffn", channels, cfg),
            hf_conv: Linear::output(&mut pb, "hf_conv", 3 * channels, 3 * channels, true),
            channels,
        }
    }

    /// `[H, W, C]` → (`x_en: [H, W, C]`, `x_hf: [H/2, W/2, 3C]`).
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let c = self.channels;
        let packed = x.dwt2()?;
        let xl = packed.slice_last(0, c)?;
        let xh = packed.slice_last(c, 3 * c)?;

        let h = self.dw.forward(p, self.lin_in.forward(p, xl)?)?.silu();
        let x1 = self.norm.forward(p, self.ss2d.forward(p, h)?)?;
        let x2 = x1.add(xl)?.add(self.lin_res.forward(p, xl)?)?;
        let xen_l = self.gffn.forward(p, x2)?;

        let hf = xh.add(self.hf_conv.forward(p, xh)?)?;
        let x_en = Var::concat_last(&[xen_l, hf])?.iwt2()?;
        Ok((x_en, xh))
    }
}

/// `LN(Up(Conv1x1_{3C→C}(Conv1x1_{3C→3C}(X^H))))`.
#[derive(Clone, Debug)]
pub struct HfPrior {
    adapt: Linear,
    align: Linear,
    norm: LayerNorm,
}

impl HfPrior {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let mut pb = pb.child(name);
        Self {
            adapt: Linear::new(&mut pb, "adapt", 3 * channels, 3 * channels, true),
            align: Linear::new(&mut pb, "align", 3 * channels, channels, true),
            norm: LayerNorm::new(&mut pb, "norm", channels),
        }
    }

    /// `[H/2, W/2, 3C]` → `[H, W, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x_hf: Var<'t>) -> Result<Var<'t>> {
        let h = self.align.forward(p, self.adapt.forward(p, x_hf)?)?;
        self.norm.forward(p, h.upsample2x()?)
    }
}

/// Detail reconstruction stage: every position of the prior queries
/// (subsampled) tokens of `x_en`; the fused result is added to `x_en`, then a
/// gated feed-forward follows.
#[derive(Clone, Debug)]
pub struct Drs {
    kv_norm: LayerNorm,
    wq: Linear,
    attn: CrossAttention,
    fuse: Linear,
    gffn: Gffn,
    channels: usize,
}

impl Drs {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, cfg: &BlockConfig) -> Self {
        let mut pb = pb.child(name);
        Self {
            kv_norm: LayerNorm::new(&mut pb, "kv_norm", channels),
            wq: Linear::new(&mut pb, "wq", channels, channels, false),
            attn: CrossAttention::new(&mut pb, "hfca", channels, cfg.token_budget),
            fuse: Linear::output(&mut pb, "fuse", channels, channels, true),
            gffn: Gffn::new(&mut pb, "gffn", channels, cfg),
            channels,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, prior: Var<'t>, x_en: Var<'t>) -> Result<Var<'t>> {
        let shape = x_en.shape();
        if prior.shape() != shape {
            return Err(crate::Error::ShapeMismatch {
                op: "drs",
                lhs: prior.shape(),
                rhs: shape,
            });
        }
        let n = shape[0] * shape[1];
        let q = self.wq.forward(p, prior.reshape(&[n, self.channels])?)?;
        let attended = self.attn.forward(p, q, self.kv_norm.forward(p, x_en)?)?;
        let h = x_en.add(self.fuse.forward(p, attended)?.reshape(&shape)?)?;
        self.gffn.forward(p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Edrm {
    pub irs: Irs,
    pub prior: HfPrior,
    pub drs: Drs,
}

impl Edrm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, cfg: &BlockConfig) -> Self {
        let mut pb = pb.child(name);
        Self {
            irs: Irs::new(&mut pb, "irs", channels, cfg),
            prior: HfPrior::new(&mut pb, "prior", channels),
            drs: Drs::new(&mut pb, "drs", channels, cfg),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (x_en, x_hf) = self.irs.forward(p, x)?;
        let prior = self.prior.forward(p, x_hf)?;
        self.drs.forward(p, prior, x_en)
    }
}
