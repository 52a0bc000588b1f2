//! Full restoration network: stem, front alignment block, U-shaped
//! encoder/decoder with restoration blocks at the bottleneck, back alignment
//! block, output head and a global input residual.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Tape, Var};
use crate::ecam::Ecam;
use crate::edrm::Edrm;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nn::{BlockConfig, Conv2d, Linear};
use crate::params::{Bound, Init, ParamBuilder, ParameterTree};
use crate::sdgm::{DegradationDescriptor, DescriptorLabel, DescriptorSource, Sdgm, SdgmConfig, TextEmbedder};

/// Bound of the uniform initialization of the output head. Small so that an
/// untrained model starts close to the identity while still passing
/// gradient to every upstream block.
const HEAD_INIT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub unet_levels: usize,
    pub edrm_count: usize,
    /// Query tokens derived from one descriptor.
    pub descriptor_queries: usize,
    pub block: BlockConfig,
    pub sdgm: SdgmConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Zero every residual-closing projection and the head. Only useful to
    /// test residual wiring: the network then returns its input.
    pub zero_init_outputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            unet_levels: 2,
            edrm_count: 4,
            descriptor_queries: 4,
            block: BlockConfig::default(),
            sdgm: SdgmConfig::default(),
            seed: 0,
            precision: Precision::F64,
            zero_init_outputs: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.edrm_count == 0 {
            return Err(Error::InvalidConfig("edrm_count must be at least 1".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::InvalidConfig("base_channels must be at least 4".into()));
        }
        if self.descriptor_queries == 0 || self.sdgm.dim == 0 {
            return Err(Error::InvalidConfig(
                "descriptor_queries and descriptor dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial dims are padded up to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        1 << (self.unet_levels + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Wecdg {
    pub config: ModelConfig,
    stem: Conv2d,
    front: Ecam,
    downs: Vec<Conv2d>,
    edrms: Vec<Edrm>,
    ups: Vec<Linear>,
    back: Ecam,
    head: Conv2d,
    text: TextEmbedder,
}

impl Wecdg {
    /// Build the network and its seeded parameters.
    pub fn new(config: ModelConfig) -> Result<(Self, ParameterTree)> {
        config.validate()?;
        let mut tree = ParameterTree::new(config.seed);
        let model = Self::build(config, &mut tree);
        Ok((model, tree))
    }

    fn build(config: ModelConfig, tree: &mut ParameterTree) -> Self {
        let seed = tree.seed();
        let text = TextEmbedder::new(&mut ParamBuilder::new(tree, "sdgm.text"), config.sdgm.dim, seed);
        let mut pb = ParamBuilder::new(tree, "net").zero_outputs(config.zero_init_outputs);
        let c0 = config.base_channels;
        let d = config.sdgm.dim;
        let t = config.descriptor_queries;
        let blk = config.block;
        let stem = Conv2d::new(&mut pb, "stem", (3, c0), 3, 1);
        let front = Ecam::new(&mut pb, "ecam_front", c0, d, t, &blk);
        let widths: Vec<usize> = (0..=config.unet_levels).map(|i| c0 << i).collect();
        let downs = (0..config.unet_levels)
            .map(|i| Conv2d::new(&mut pb, &format!("down{i}"), (widths[i], widths[i + 1]), 3, 2))
            .collect();
        let bottleneck = widths[config.unet_levels];
        let edrms = (0..config.edrm_count)
            .map(|i| Edrm::new(&mut pb, &format!("edrm{i}"), bottleneck, &blk))
            .collect();
        let ups = (0..config.unet_levels)
            .map(|i| Linear::new(&mut pb, &format!("up{i}"), widths[i + 1] + widths[i], widths[i], true))
            .collect();
        let back = Ecam::new(&mut pb, "ecam_back", c0, d, t, &blk);
        let head = {
            let mut hb = pb.child("head");
            let w = hb.add_output("w", &[3, 3, c0, 3], Init::UniformBound(HEAD_INIT));
            let b = hb.add("b", &[3], Init::Zeros);
            Conv2d::from_names(w, Some(b), 3, 1)
        };
        Self {
            config,
            stem,
            front,
            downs,
            edrms,
            ups,
            back,
            head,
            text,
        }
    }

    pub fn tape(&self) -> Tape {
        Tape::with_precision(self.config.precision)
    }

    /// Network output before the clamp, for a padded `[H, W, 3]` input whose
    /// dims are multiples of [`ModelConfig::pad_multiple`].
    pub fn forward_unclamped<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, descriptor: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.stem.forward(p, x)?;
        h = self.front.forward(p, h, descriptor)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        for down in &self.downs {
            skips.push(h);
            h = down.forward(p, h)?.silu();
        }
        for edrm in &self.edrms {
            h = edrm.forward(p, h)?;
        }
        for (up, skip) in self.ups.iter().zip(skips).rev() {
            let merged = Var::concat_last(&[h.upsample2x()?, skip])?;
            h = up.forward(p, merged)?.silu();
        }
        h = self.back.forward(p, h, descriptor)?;
        x.add(self.head.forward(p, h)?)
    }

    pub fn forward_padded<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, descriptor: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_unclamped(p, x, descriptor)?.clamp(0.0, 1.0))
    }

    /// Reflect-pad `pixels` to the next multiple, run, clamp and crop back.
    pub fn forward_var<'t>(&self, p: &Bound<'t, '_>, pixels: Var<'t>, descriptor: Var<'t>) -> Result<Var<'t>> {
        let shape = pixels.shape();
        let (h, w) = (shape[0], shape[1]);
        let m = self.config.pad_multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        if ph >= h || pw >= w {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                crop: m,
            });
        }
        let padded = pixels.pad_reflect(ph, pw)?;
        let out = self.forward_padded(p, padded, descriptor)?;
        if ph == 0 && pw == 0 {
            Ok(out)
        } else {
            out.crop(0, 0, h, w)
        }
    }

    pub fn forward(&self, params: &ParameterTree, img: &ImageBuffer, descriptor: &DegradationDescriptor) -> Result<ImageBuffer> {
        let tape = self.tape();
        let p = Bound::frozen(&tape, params);
        let out = self.forward_var(
            &p,
            tape.constant(img.pixels().clone()),
            tape.constant(descriptor.embedding.clone()),
        )?;
        let out = out.to_tensor();
        if !out.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(ImageBuffer::from_unclamped(out)?.with_original_size(img.original_size()))
    }

    /// Descriptor for `label` from the model's own text embedder.
    pub fn descriptor(&self, params: &ParameterTree, label: DescriptorLabel) -> Result<DegradationDescriptor> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, params);
        let embedding = self.text.forward(&p, label)?.to_tensor();
        if embedding.norm() == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(DegradationDescriptor {
            label,
            embedding,
            source: DescriptorSource::Manual,
        })
    }

    pub fn correct_manual(&self, params: &ParameterTree, img: &ImageBuffer, label: DescriptorLabel) -> Result<ImageBuffer> {
        let d = self.descriptor(params, label)?;
        self.forward(params, img, &d)
    }

    /// Classify with the descriptor module, then restore with the matched
    /// label's descriptor.
    pub fn correct_auto(
        &self,
        params: &ParameterTree,
        sdgm: &Sdgm,
        sdgm_params: &ParameterTree,
        img: &ImageBuffer,
    ) -> Result<(ImageBuffer, DegradationDescriptor, Vec<f64>)> {
        let (matched, probs) = sdgm.classify(sdgm_params, img)?;
        let mut d = self.descriptor(params, matched.label)?;
        d.source = DescriptorSource::Auto;
        let out = self.forward(params, img, &d)?;
        Ok((out, d, probs))
    }

    /// Trainable parameter names of the restoration network (everything but
    /// the shared text embedder).
    pub fn is_network_param(name: &str) -> bool {
        name.starts_with("net.")
    }

    pub fn param_count(params: &ParameterTree) -> usize {
        params
            .iter()
            .filter(|(k, _)| Self::is_network_param(k))
            .map(|(_, v)| v.numel())
            .sum()
    }
}

/// Copy the text-embedder entries of a descriptor-module checkpoint into
/// restoration parameters so both sides share descriptors.
pub fn adopt_text_embedder(params: &mut ParameterTree, sdgm_params: &ParameterTree) -> Result<()> {
    let text = Sdgm::text_params(sdgm_params);
    for (name, value) in text.iter() {
        match params.get(name) {
            Some(v) if v.shape() == value.shape() => params.insert(name.clone(), value.clone()),
            Some(v) => {
                return Err(Error::ShapeMismatch {
                    op: "adopt text embedder",
                    lhs: v.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                })
            }
            None => return Err(Error::InvalidConfig(format!("unexpected parameter `{name}`"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdgm::ExposureClass;
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            unet_levels: 1,
            edrm_count: 1,
            descriptor_queries: 2,
            sdgm: SdgmConfig {
                dim: 6,
                ..SdgmConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn image(h: usize, w: usize) -> ImageBuffer {
        let n = h * w * 3;
        ImageBuffer::new(
            Tensor::new(
                vec![h, w, 3],
                (0..n).map(|i| 0.5 + 0.4 * (i as f64 * 0.37).sin()).collect(),
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn odd_sizes_round_trip() {
        let (m, p) = Wecdg::new(small()).unwrap();
        let img = image(13, 10);
        let out = m
            .correct_manual(&p, &img, DescriptorLabel::Base(ExposureClass::Underexposed))
            .unwrap();
        assert_eq!((out.height(), out.width()), (13, 10));
        assert!(out.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_configuration_returns_input() {
        let (m, p) = Wecdg::new(ModelConfig {
            zero_init_outputs: true,
            ..small()
        })
        .unwrap();
        let img = image(9, 12);
        let out = m
            .correct_manual(&p, &img, DescriptorLabel::Base(ExposureClass::Overexposed))
            .unwrap();
        assert!(out.pixels().max_abs_diff(img.pixels()) < 1e-12);
    }

    #[test]
    fn mix_endpoints_reproduce_base_outputs() {
        let (m, p) = Wecdg::new(small()).unwrap();
        let img = image(8, 8);
        let (u, o) = (ExposureClass::Underexposed, ExposureClass::Overexposed);
        let base = |c| m.correct_manual(&p, &img, DescriptorLabel::Base(c)).unwrap();
        let mixed = |w| m.correct_manual(&p, &img, DescriptorLabel::mix(u, o, w).unwrap()).unwrap();
        assert_eq!(mixed(1.0).pixels(), base(u).pixels());
        assert_eq!(mixed(0.0).pixels(), base(o).pixels());
        assert!(mixed(0.5).pixels().max_abs_diff(base(u).pixels()) > 0.0);
    }

    #[test]
    fn tiny_images_are_rejected() {
        let (m, p) = Wecdg::new(small()).unwrap();
        let img = image(2, 9);
        assert!(matches!(
            m.correct_manual(&p, &img, DescriptorLabel::Base(ExposureClass::WellExposed)),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn config_rejects_zero_blocks() {
        let cfg = ModelConfig {
            edrm_count: 0,
            ..ModelConfig::default()
        };
        assert!(Wecdg::new(cfg).is_err());
    }
}
