//! Descriptor-conditioned alignment block: descriptor cross-attention,
//! channel self-attention, then a gated feed-forward, each pre-norm with a
//! residual.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, ChannelAttention, CrossAttention, Gffn, LayerNorm, Linear};
use crate::params::{Bound, ParamBuilder};

/// Cross-attention whose `t` queries are a linear image of the descriptor
/// embedding. The attended `[t, C]` result is flattened, mapped to `C` and
/// added to every position.
#[derive(Clone, Debug)]
pub struct Dca {
    norm: LayerNorm,
    wq: Linear,
    attn: CrossAttention,
    fuse: Linear,
    queries: usize,
    channels: usize,
}

impl Dca {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        descriptor_dim: usize,
        queries: usize,
        cfg: &BlockConfig,
    ) -> Self {
        let mut pb = pb.child(name);
        Self {
            norm: LayerNorm::new(&mut pb, "norm", channels),
            wq: Linear::new(&mut pb, "wq", descriptor_dim, queries * channels, true),
            attn: CrossAttention::new(&mut pb, "attn", channels, cfg.token_budget),
            fuse: Linear::output(&mut pb, "fuse", queries * channels, channels, true),
            queries,
            channels,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, descriptor: Var<'t>) -> Result<Var<'t>> {
        let d = descriptor.numel();
        if d != self.wq.cin {
            return Err(Error::ShapeMismatch {
                op: "dca descriptor",
                lhs: vec![self.wq.cin],
                rhs: descriptor.shape(),
            });
        }
        let q = self
            .wq
            .forward(p, descriptor.reshape(&[1, d])?)?
            .reshape(&[self.queries, self.channels])?;
        let attended = self.attn.forward(p, q, self.norm.forward(p, x)?)?;
        let flat = attended.reshape(&[1, self.queries * self.channels])?;
        let fused = self.fuse.forward(p, flat)?.reshape(&[self.channels])?;
        x.add(fused)
    }
}

#[derive(Clone, Debug)]
pub struct Ecam {
    pub dca: Dca,
    pub sa: ChannelAttention,
    pub gffn: Gffn,
}

impl Ecam {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        descriptor_dim: usize,
        queries: usize,
        cfg: &BlockConfig,
    ) -> Self {
        let mut pb = pb.child(name);
        Self {
            dca: Dca::new(&mut pb, "dca", channels, descriptor_dim, queries, cfg),
            sa: ChannelAttention::new(&mut pb, "sa", channels),
            gffn: Gffn::new(&mut pb, "gffn", channels, cfg),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, descriptor: Var<'t>) -> Result<Var<'t>> {
        let x = self.dca.forward(p, x, descriptor)?;
        let x = self.sa.forward(p, x)?;
        self.gffn.forward(p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParameterTree;
    use crate::tensor::Tensor;

    fn features(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.61).sin()).collect()).unwrap()
    }

    fn block(zero: bool) -> (Ecam, ParameterTree) {
        let mut tree = ParameterTree::new(21);
        let e = Ecam::new(
            &mut ParamBuilder::new(&mut tree, "").zero_outputs(zero),
            "ecam",
            4,
            6,
            2,
            &BlockConfig::default(),
        );
        (e, tree)
    }

    #[test]
    fn zeroed_outputs_give_identity() {
        let (e, tree) = block(true);
        let tape = Tape::new();
        let p = Bound::new(&tape, &tree);
        let x = tape.constant(features(&[6, 5, 4]));
        let desc = tape.constant(Tensor::vector(vec![0.3, -1.0, 0.2, 0.9, 0.0, 0.5]));
        let y = e.forward(&p, x, desc).unwrap();
        assert_eq!(y.to_tensor(), x.to_tensor());
    }

    #[test]
    fn descriptor_changes_output() {
        let (e, tree) = block(false);
        let tape = Tape::new();
        let p = Bound::new(&tape, &tree);
        let x = tape.constant(features(&[4, 4, 4]));
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        let ya = e.forward(&p, x, a).unwrap().to_tensor();
        let yb = e.forward(&p, x, b).unwrap().to_tensor();
        assert_eq!(ya.shape(), &[4, 4, 4]);
        assert!(ya.max_abs_diff(&yb) > 1e-6);
    }

    #[test]
    fn rejects_wrong_descriptor_width() {
        let (e, tree) = block(false);
        let tape = Tape::new();
        let p = Bound::new(&tape, &tree);
        let x = tape.constant(features(&[2, 2, 4]));
        let bad = tape.constant(Tensor::vector(vec![1.0; 5]));
        assert!(matches!(
            e.forward(&p, x, bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
