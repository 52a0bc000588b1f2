//! Degradation descriptors: text-side embeddings, the image encoder that is
//! matched against them, and their training.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nn::{Conv2d, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::params::{param_rng, Bound, Init, ParamBuilder, ParameterTree};
use crate::tensor::Tensor;

/// The three base exposure classes, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExposureClass {
    Underexposed,
    WellExposed,
    Overexposed,
}

impl ExposureClass {
    pub const ALL: [ExposureClass; 3] = [Self::Underexposed, Self::WellExposed, Self::Overexposed];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Underexposed => "underexposed",
            Self::WellExposed => "well-exposed",
            Self::Overexposed => "overexposed",
        }
    }
}

impl fmt::Display for ExposureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExposureClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "underexposed" | "under" => Ok(Self::Underexposed),
            "well-exposed" | "well" | "wellexposed" | "well_exposed" => Ok(Self::WellExposed),
            "overexposed" | "over" => Ok(Self::Overexposed),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

/// A base class or a weighted mix `w·a + (1 − w)·b` of two of them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DescriptorLabel {
    Base(ExposureClass),
    Mix {
        a: ExposureClass,
        b: ExposureClass,
        w: f64,
    },
}

impl DescriptorLabel {
    pub fn mix(a: ExposureClass, b: ExposureClass, w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidConfig(format!("mix weight {w} outside [0, 1]")));
        }
        Ok(Self::Mix { a, b, w })
    }

    /// The class whose embedding dominates.
    pub fn dominant(&self) -> ExposureClass {
        match *self {
            Self::Base(c) => c,
            Self::Mix { a, b, w } => {
                if w >= 0.5 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

impl fmt::Display for DescriptorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Base(c) => write!(f, "{c}"),
            Self::Mix { a, b, w } => write!(f, "mix({a},{b},{w})"),
        }
    }
}

impl FromStr for DescriptorLabel {
    type Err = Error;

    /// Accepts class names and `mix(a,b,w)`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Some(inner) = t.strip_prefix("mix(").and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<&str> = inner.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::UnknownLabel(s.to_string()));
            }
            let w: f64 = parts[2]
                .trim()
                .parse()
                .map_err(|_| Error::UnknownLabel(s.to_string()))?;
            return Self::mix(parts[0].parse()?, parts[1].parse()?, w);
        }
        Ok(Self::Base(t.parse()?))
    }
}

/// Exposure tags used by dataset manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExposureLabel {
    #[serde(rename = "N1.5")]
    N15,
    #[serde(rename = "N1")]
    N1,
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "P1")]
    P1,
    #[serde(rename = "P1.5")]
    P15,
    #[serde(rename = "under")]
    Under,
    #[serde(rename = "over")]
    Over,
    #[serde(rename = "GT")]
    Gt,
}

impl ExposureLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::N15 => "N1.5",
            Self::N1 => "N1",
            Self::Zero => "0",
            Self::P1 => "P1",
            Self::P15 => "P1.5",
            Self::Under => "under",
            Self::Over => "over",
            Self::Gt => "GT",
        }
    }

    /// Descriptor for this tag; the intermediate levels interpolate toward
    /// well-exposed with weight `w` on the extreme class.
    pub fn descriptor(self, w: f64) -> DescriptorLabel {
        use ExposureClass::*;
        match self {
            Self::N15 | Self::Under => DescriptorLabel::Base(Underexposed),
            Self::P15 | Self::Over => DescriptorLabel::Base(Overexposed),
            Self::Zero | Self::Gt => DescriptorLabel::Base(WellExposed),
            Self::N1 => DescriptorLabel::Mix {
                a: Underexposed,
                b: WellExposed,
                w,
            },
            Self::P1 => DescriptorLabel::Mix {
                a: Overexposed,
                b: WellExposed,
                w,
            },
        }
    }

    pub fn class(self, w: f64) -> ExposureClass {
        self.descriptor(w).dominant()
    }
}

impl fmt::Display for ExposureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExposureLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "N1.5" => Self::N15,
            "N1" => Self::N1,
            "0" => Self::Zero,
            "P1" => Self::P1,
            "P1.5" => Self::P15,
            "under" => Self::Under,
            "over" => Self::Over,
            "GT" | "gt" => Self::Gt,
            _ => return Err(Error::UnknownLabel(s.to_string())),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorSource {
    Manual,
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationDescriptor {
    pub label: DescriptorLabel,
    pub embedding: Tensor,
    pub source: DescriptorSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdgmConfig {
    /// Embedding width.
    pub dim: usize,
    /// Cosine scale.
    pub delta: f64,
    /// Weight of the extreme class for the intermediate exposure levels.
    pub mix_weight: f64,
}

impl Default for SdgmConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            delta: 10.0,
            mix_weight: 0.5,
        }
    }
}

const TEXT_PREFIX: &str = "sdgm.text";
const IMAGE_PREFIX: &str = "sdgm.image";

/// Base-word table followed by a `d → 2d → d` SiLU MLP.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    table: String,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

/// Rows of a seeded random matrix made orthonormal by Gram-Schmidt.
fn orthonormal_rows(rows: usize, dim: usize, seed: u64) -> Tensor {
    assert!(rows <= dim, "cannot fit {rows} orthonormal rows in {dim} dims");
    let mut rng = param_rng(seed, "orthonormal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_parts(vec![rows, dim], out.concat())
}

impl TextEmbedder {
    pub fn new(pb: &mut ParamBuilder, dim: usize, seed: u64) -> Self {
        Self {
            table: pb.add("table", &[3, dim], Init::Value(orthonormal_rows(3, dim, seed))),
            fc1: Linear::new(pb, "fc1", dim, 2 * dim, true),
            fc2: Linear::new(pb, "fc2", 2 * dim, dim, true),
            dim,
        }
    }

    fn refine<'t>(&self, p: &Bound<'t, '_>, class: ExposureClass) -> Result<Var<'t>> {
        let row = p
            .get(&self.table)
            .transpose()?.slice_last(class.index(), 1)?.transpose()?;
        let h = self.fc1.forward(p, row)?.silu();
        self.fc2.forward(p, h)?.reshape(&[self.dim])
    }

    /// `[d]` embedding of a label.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, label: DescriptorLabel) -> Result<Var<'t>> {
        match label {
            DescriptorLabel::Base(c) => self.refine(p, c),
            DescriptorLabel::Mix { a, b, w } => {
                let ea = self.refine(p, a)?.scale(w);
                let eb = self.refine(p, b)?.scale(1.0 - w);
                ea.add(eb)
            }
        }
    }
}

/// Parse a plain-text embedding file (one token followed by `dim` floats per
/// line) into a `[3, dim]` table for the three base classes.
pub fn load_embedding_table(path: &Path, dim: usize) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut rows: [Option<Vec<f64>>; 3] = [None, None, None];
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(token) = it.next() else { continue };
        let Ok(class) = token.parse::<ExposureClass>() else {
            continue;
        };
        let values = it
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| corrupt(format!("line {}: {e}", lineno + 1)))?;
        if values.len() != dim {
            return Err(corrupt(format!(
                "line {}: expected {dim} values, found {}",
                lineno + 1,
                values.len()
            )));
        }
        rows[class.index()] = Some(values);
    }
    let mut data = Vec::with_capacity(3 * dim);
    for (class, row) in ExposureClass::ALL.iter().zip(rows) {
        data.extend(row.ok_or_else(|| corrupt(format!("no vector for `{class}`")))?);
    }
    Ok(Tensor::from_parts(vec![3, dim], data))
}

/// Four stride-2 SiLU conv stages, global average pooling, then an MLP.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stages: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

const ENCODER_WIDTHS: [usize; 4] = [16, 32, 64, 64];

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        let mut cin = 3;
        let stages = ENCODER_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let conv = Conv2d::new(pb, &format!("conv{i}"), (cin, cout), 3, 2);
                cin = cout;
                conv
            })
            .collect();
        Self {
            stages,
            fc1: Linear::new(pb, "fc1", cin, cin, true),
            fc2: Linear::new(pb, "fc2", cin, dim, true),
            dim,
        }
    }

    /// `[H, W, 3]` → `[d]`.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, img: Var<'t>) -> Result<Var<'t>> {
        let mut x = img;
        for conv in &self.stages {
            x = conv.forward(p, x)?.silu();
        }
        let s = x.shape();
        let pooled = x
            .reshape(&[s[0] * s[1], s[2]])?
            .sum_axis(0)?
            .scale(1.0 / (s[0] * s[1]) as f64);
        let h = self.fc1.forward(p, pooled)?.silu();
        self.fc2.forward(p, h)?.reshape(&[self.dim])
    }
}

/// `δ · cos(e_v, e_t)`.
pub fn cosine_score(e_v: &Tensor, e_t: &Tensor, delta: f64) -> Result<f64> {
    if e_v.shape() != e_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_score",
            lhs: e_v.shape().to_vec(),
            rhs: e_t.shape().to_vec(),
        });
    }
    let (nv, nt) = (e_v.norm(), e_t.norm());
    if nv == 0.0 || nt == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = e_v.data().iter().zip(e_t.data()).map(|(a, b)| a * b).sum();
    Ok(delta * dot / (nv * nt))
}

/// Taped `δ · cos(a, b)` for two `[d]` vars.
fn cosine_var<'t>(a: Var<'t>, b: Var<'t>, delta: f64) -> Result<Var<'t>> {
    let dot = a.mul(b)?.sum();
    let norms = a.square().sum().mul(b.square().sum())?.sqrt();
    Ok(dot.div(norms)?.scale(delta))
}

/// Softmax over the scores of `e_v` against every descriptor. Returns the
/// index of the most probable descriptor (first one on ties) and the
/// distribution.
pub fn match_descriptor(
    e_v: &Tensor,
    descriptors: &[DegradationDescriptor],
    delta: f64,
) -> Result<(usize, Vec<f64>)> {
    if descriptors.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    let scores = descriptors
        .iter()
        .map(|d| cosine_score(e_v, &d.embedding, delta))
        .collect::<Result<Vec<_>>>()?;
    let probs = softmax(&scores);
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok((best, probs))
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Text embedder plus image encoder with their configuration.
#[derive(Clone, Debug)]
pub struct Sdgm {
    pub config: SdgmConfig,
    pub text: TextEmbedder,
    pub image: ImageEncoder,
}

impl Sdgm {
    /// Register both halves under `sdgm.text` and `sdgm.image`.
    pub fn new(tree: &mut ParameterTree, config: SdgmConfig) -> Self {
        let seed = tree.seed();
        let text = TextEmbedder::new(&mut ParamBuilder::new(tree, TEXT_PREFIX), config.dim, seed);
        let image = ImageEncoder::new(&mut ParamBuilder::new(tree, IMAGE_PREFIX), config.dim);
        Self {
            config,
            text,
            image,
        }
    }

    pub fn table_name() -> String {
        format!("{TEXT_PREFIX}.table")
    }

    /// Names of the text-side parameters (shared with restoration models).
    pub fn text_params(tree: &ParameterTree) -> ParameterTree {
        tree.subtree(TEXT_PREFIX)
    }

    pub fn embed_text(&self, params: &ParameterTree, label: DescriptorLabel) -> Result<DegradationDescriptor> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, params);
        let e = self.text.forward(&p, label)?.to_tensor();
        if e.norm() == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(DegradationDescriptor {
            label,
            embedding: e,
            source: DescriptorSource::Manual,
        })
    }

    /// The three base-class descriptors in table order.
    pub fn base_descriptors(&self, params: &ParameterTree) -> Result<Vec<DegradationDescriptor>> {
        ExposureClass::ALL
            .iter()
            .map(|c| self.embed_text(params, DescriptorLabel::Base(*c)))
            .collect()
    }

    pub fn embed_image(&self, params: &ParameterTree, img: &ImageBuffer) -> Result<Tensor> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, params);
        let x = tape.constant(img.pixels().clone());
        let e = self.image.forward(&p, x)?.to_tensor();
        if !e.is_finite() {
            return Err(Error::NonFinite("image embedding".into()));
        }
        Ok(e)
    }

    /// Automatic mode: the best-matching base descriptor and the probabilities
    /// over all three.
    pub fn classify(&self, params: &ParameterTree, img: &ImageBuffer) -> Result<(DegradationDescriptor, Vec<f64>)> {
        let e_v = self.embed_image(params, img)?;
        let descriptors = self.base_descriptors(params)?;
        let (best, probs) = match_descriptor(&e_v, &descriptors, self.config.delta)?;
        let mut d = descriptors[best].clone();
        d.source = DescriptorSource::Auto;
        Ok((d, probs))
    }

    /// Cross-entropy of the match distribution against `class`.
    pub fn loss<'t>(&self, p: &Bound<'t, '_>, img: Var<'t>, class: ExposureClass) -> Result<Var<'t>> {
        let e_v = self.image.forward(p, img)?;
        let mut scores = Vec::with_capacity(3);
        for c in ExposureClass::ALL {
            let e_t = self.text.forward(p, DescriptorLabel::Base(c))?;
            scores.push(cosine_var(e_v, e_t, self.config.delta)?);
        }
        // Scores are bounded by δ, so the plain log-sum-exp is safe.
        let mut z = scores[0].exp();
        for s in &scores[1..] {
            z = z.add(s.exp())?;
        }
        z.ln().sub(scores[class.index()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdgmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for SdgmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch: 8,
        }
    }
}

/// Minimize the match cross-entropy over `(image, class)` pairs. Returns the
/// mean loss of every epoch.
pub fn train_sdgm(
    sdgm: &Sdgm,
    params: &mut ParameterTree,
    samples: &[(ImageBuffer, ExposureClass)],
    cfg: &SdgmTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let tape = Tape::new();
            let p = Bound::new(&tape, params);
            let mut loss: Option<Var<'_>> = None;
            for &i in chunk {
                let (img, class) = &samples[i];
                let l = sdgm.loss(&p, tape.constant(img.pixels().clone()), *class)?;
                loss = Some(match loss {
                    Some(acc) => acc.add(l)?,
                    None => l,
                });
            }
            let loss = loss.expect("non-empty chunk").scale(1.0 / chunk.len() as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("sdgm loss at epoch {epoch}")));
            }
            total += value * chunk.len() as f64;
            let grads = p.grads(&tape.backward(loss)?);
            drop(p);
            adam.step(params, &grads)?;
        }
        let mean = total / samples.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}
