//! Learned building blocks shared by every module of the model.
//!
//! Each block registers its parameters through a [`ParamBuilder`] at
//! construction and keeps only their names; `forward` looks them up in a
//! [`Bound`] parameter set, so one block definition serves training,
//! inference and gradient checking.

mod attention;
mod ss2d;

pub use attention::{attention, attention_with_offset, ChannelAttention, CrossAttention, Temperature, TokenSource};
pub use ss2d::Ss2d;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamBuilder};

pub const LN_EPS: f64 = 1e-6;

/// Width and state settings shared by the blocks of one model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    /// Hidden-width multiplier of the feed-forward and scan branches.
    pub expansion: f64,
    /// Hidden state size per channel in the selective scan.
    pub state_dim: usize,
    /// Maximum key/value tokens before strided subsampling kicks in.
    pub token_budget: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            expansion: 2.0,
            state_dim: 4,
            token_budget: 1024,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.expansion >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "expansion must be >= 1, got {}",
                self.expansion
            )));
        }
        if self.state_dim == 0 || self.token_budget == 0 {
            return Err(Error::InvalidConfig(
                "state_dim and token_budget must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn hidden(&self, channels: usize) -> usize {
        (self.expansion * channels as f64).ceil() as usize
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let mut pb = pb.child(name);
        Self {
            w: pb.add("w", &[cin, cout], Init::Uniform { fan_in: cin }),
            b: bias.then(|| pb.add("b", &[cout], Init::Zeros)),
            cin,
            cout,
        }
    }

    pub fn with_bias(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, bias: f64) -> Self {
        let mut pb = pb.child(name);
        Self {
            w: pb.add("w", &[cin, cout], Init::Uniform { fan_in: cin }),
            b: Some(pb.add("b", &[cout], Init::Constant(bias))),
            cin,
            cout,
        }
    }

    /// A projection that closes a residual branch; zero in identity mode.
    pub fn output(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let mut pb = pb.child(name);
        Self {
            w: pb.add_output("w", &[cin, cout], Init::Uniform { fan_in: cin }),
            b: bias.then(|| pb.add("b", &[cout], Init::Zeros)),
            cin,
            cout,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p.get(&self.w), self.b.as_ref().map(|b| p.get(b)))
    }
}

/// Square-kernel convolution over `[H, W, C]` maps with "same"-style zero
/// padding of `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: String,
    b: Option<String>,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        stride: usize,
    ) -> Self {
        let mut pb = pb.child(name);
        Self {
            w: pb.add(
                "w",
                &[kernel, kernel, cin, cout],
                Init::Uniform {
                    fan_in: kernel * kernel * cin,
                },
            ),
            b: Some(pb.add("b", &[cout], Init::Zeros)),
            kernel,
            stride,
        }
    }

    /// Wrap parameters registered elsewhere.
    pub fn from_names(w: String, b: Option<String>, kernel: usize, stride: usize) -> Self {
        Self { w, b, kernel, stride }
    }

    pub fn output(pb: &mut ParamBuilder, name: &str, (cin, cout): (usize, usize), kernel: usize) -> Self {
        let mut pb = pb.child(name);
        Self {
            w: pb.add_output(
                "w",
                &[kernel, kernel, cin, cout],
                Init::Uniform {
                    fan_in: kernel * kernel * cin,
                },
            ),
            b: Some(pb.add("b", &[cout], Init::Zeros)),
            kernel,
            stride: 1,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            p.get(&self.w),
            self.b.as_ref().map(|b| p.get(b)),
            self.stride,
            self.kernel / 2,
        )
    }
}

#[derive(Clone, Debug)]
pub struct DwConv3 {
    w: String,
    b: String,
}

impl DwConv3 {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let mut pb = pb.child(name);
        Self {
            w: pb.add("w", &[3, 3, channels], Init::Uniform { fan_in: 9 }),
            b: pb.add("b", &[channels], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.dwconv3x3(p.get(&self.w), Some(p.get(&self.b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let mut pb = pb.child(name);
        Self {
            gamma: pb.add("gamma", &[channels], Init::Constant(1.0)),
            beta: pb.add("beta", &[channels], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(&self.gamma), p.get(&self.beta), LN_EPS)
    }
}

/// Gated depthwise feed-forward block with a residual:
/// `x + W_out(GELU(dw(W1·LN x)) ⊙ dw(W2·LN x))`.
///
/// `W1` and `W2` are stored as one `C → 2·hidden` matrix and the two
/// depthwise convolutions as one over `2·hidden` channels; the split is taken
/// afterwards.
#[derive(Clone, Debug)]
pub struct Gffn {
    norm: LayerNorm,
    proj_in: Linear,
    dw: DwConv3,
    proj_out: Linear,
    hidden: usize,
}

impl Gffn {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, cfg: &BlockConfig) -> Self {
        let mut pb = pb.child(name);
        let hidden = cfg.hidden(channels);
        Self {
            norm: LayerNorm::new(&mut pb, "norm", channels),
            proj_in: Linear::new(&mut pb, "proj_in", channels, 2 * hidden, false),
            dw: DwConv3::new(&mut pb, "dw", 2 * hidden),
            proj_out: Linear::output(&mut pb, "proj_out", hidden, channels, false),
            hidden,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.proj_in.forward(p, self.norm.forward(p, x)?)?;
        let h = self.dw.forward(p, h)?;
        let gate = h.slice_last(0, self.hidden)?.gelu();
        let value = h.slice_last(self.hidden, self.hidden)?;
        x.add(self.proj_out.forward(p, gate.mul(value)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParameterTree;
    use crate::tensor::Tensor;

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap()
    }

    #[test]
    fn gffn_identity_when_output_is_zero() {
        let mut tree = ParameterTree::new(3);
        let g = Gffn::new(
            &mut ParamBuilder::new(&mut tree, "").zero_outputs(true),
            "g",
            3,
            &BlockConfig::default(),
        );
        let tape = Tape::new();
        let p = Bound::new(&tape, &tree);
        let x = tape.constant(ramp(&[4, 5, 3]));
        let y = g.forward(&p, x).unwrap();
        assert_eq!(y.to_tensor(), x.to_tensor());
    }

    #[test]
    fn gffn_hidden_width_rounds_up() {
        let cfg = BlockConfig {
            expansion: 1.5,
            ..BlockConfig::default()
        };
        assert_eq!(cfg.hidden(3), 5);
        let mut tree = ParameterTree::new(0);
        Gffn::new(&mut ParamBuilder::new(&mut tree, ""), "g", 3, &cfg);
        assert_eq!(tree.get("g.proj_in.w").unwrap().shape(), &[3, 10]);
        assert_eq!(tree.get("g.proj_out.w").unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tree = ParameterTree::new(0);
        let ln = LayerNorm::new(&mut ParamBuilder::new(&mut tree, ""), "ln", 2);
        let tape = Tape::new();
        let p = Bound::new(&tape, &tree);
        let y = ln
            .forward(&p, tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap()))
            .unwrap();
        let s = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!(y.to_tensor().max_abs_diff(&Tensor::new(vec![1, 2], vec![s, -s]).unwrap()) < 1e-15);
        let c = ln.forward(&p, tape.constant(Tensor::full(&[3, 2], 4.0))).unwrap();
        assert!(c.to_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(BlockConfig::default().validate().is_ok());
        let bad = BlockConfig {
            expansion: 0.5,
            ..BlockConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
