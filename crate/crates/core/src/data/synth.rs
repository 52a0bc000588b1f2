use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::io::save_image;
use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::params::param_rng;
use crate::sdgm::ExposureLabel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub under_gamma: (f64, f64),
    pub under_gain: (f64, f64),
    pub over_gamma: (f64, f64),
    pub over_gain: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 64,
            size: 64,
            seed: 0,
            under_gamma: (1.8, 3.0),
            under_gain: (0.5, 0.9),
            over_gamma: (0.3, 0.6),
            over_gain: (1.1, 1.6),
        }
    }
}

/// One generated ground truth with its two degraded versions, all already
/// quantized to 8 bits.
#[derive(Clone, Debug)]
pub struct SynthTriple {
    pub gt: ImageBuffer,
    pub under: ImageBuffer,
    pub over: ImageBuffer,
}

fn quantize(v: f64) -> f64 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) / 255.0
}

fn range(r: (f64, f64)) -> RangeInclusive<f64> {
    r.0.min(r.1)..=r.0.max(r.1)
}

/// Procedural image: a tilted color ramp, a few soft-edged discs and boxes,
/// a low-frequency ripple and fine noise, squeezed into `[0.05, 0.95]`.
pub fn synth_ground_truth(seed: u64, index: usize, size: usize) -> Result<ImageBuffer> {
    if size == 0 {
        return Err(Error::EmptyImage);
    }
    let mut rng = param_rng(seed, &format!("synth/{index}"));
    let n = size as f64;
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.4..0.4));

    struct Shape {
        disc: bool,
        cy: f64,
        cx: f64,
        r: f64,
        color: [f64; 3],
        alpha: f64,
    }
    let shapes: Vec<Shape> = (0..rng.gen_range(2..=4))
        .map(|_| Shape {
            disc: rng.gen_bool(0.5),
            cy: rng.gen_range(0.0..n),
            cx: rng.gen_range(0.0..n),
            r: rng.gen_range(0.08 * n..0.3 * n),
            color: std::array::from_fn(|_| rng.gen_range(0.05..0.95)),
            alpha: rng.gen_range(0.5..0.9),
        })
        .collect();
    let freq = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / n;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let ripple = rng.gen_range(0.02..0.06);

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = ((fx - n / 2.0) * dx + (fy - n / 2.0) * dy) / n;
            let mut px: [f64; 3] = std::array::from_fn(|c| c0[c] + c1[c] * t);
            for s in &shapes {
                let d = if s.disc {
                    ((fy - s.cy).powi(2) + (fx - s.cx).powi(2)).sqrt() - s.r
                } else {
                    (fy - s.cy).abs().max((fx - s.cx).abs()) - s.r
                };
                // Soft edge over about two pixels.
                let cover = s.alpha * (0.5 - 0.5 * (d / 1.5).tanh());
                for c in 0..3 {
                    px[c] += cover * (s.color[c] - px[c]);
                }
            }
            let wave = ripple * (freq * (fx * dy - fy * dx) + phase).sin();
            for v in &mut px {
                let noise = rng.gen_range(-0.02..0.02);
                data.push(quantize((*v + wave + noise).clamp(0.05, 0.95)));
            }
        }
    }
    ImageBuffer::new(Tensor::new(vec![size, size, 3], data)?)
}

fn degrade(gt: &ImageBuffer, gamma: f64, gain: f64) -> Result<ImageBuffer> {
    ImageBuffer::new(gt.pixels().map(|v| quantize((gain * v.powf(gamma)).clamp(0.0, 1.0))))
}

/// Generate triple `index`. Deterministic in `(cfg, index)`.
pub fn synth_triple(cfg: &SynthConfig, index: usize) -> Result<SynthTriple> {
    let gt = synth_ground_truth(cfg.seed, index, cfg.size)?;
    let mut rng = param_rng(cfg.seed, &format!("degrade/{index}"));
    let under = degrade(&gt, rng.gen_range(range(cfg.under_gamma)), rng.gen_range(range(cfg.under_gain)))?;
    let over = degrade(&gt, rng.gen_range(range(cfg.over_gamma)), rng.gen_range(range(cfg.over_gain)))?;
    let (mu, mg, mo) = (under.mean(), gt.mean(), over.mean());
    if !(mu < mg && mg < mo) {
        return Err(Error::InvalidConfig(format!(
            "synthetic triple {index} breaks the exposure ordering: under {mu:.4}, gt {mg:.4}, over {mo:.4}"
        )));
    }
    Ok(SynthTriple { gt, under, over })
}

/// Write `cfg.count` triples as PNGs under `out_dir/{gt,under,over}` and a
/// `manifest.json` listing every image (including the GT itself with label
/// `GT`).
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.count == 0 {
        return Err(Error::EmptyDataset);
    }
    for sub in ["gt", "under", "over"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let mut entries = Vec::with_capacity(cfg.count * 3);
    for i in 0..cfg.count {
        let t = synth_triple(cfg, i)?;
        let name = format!("{i:04}.png");
        let gt_rel = PathBuf::from("gt").join(&name);
        for (sub, img, label) in [
            ("gt", &t.gt, ExposureLabel::Gt),
            ("under", &t.under, ExposureLabel::Under),
            ("over", &t.over, ExposureLabel::Over),
        ] {
            let rel = PathBuf::from(sub).join(&name);
            save_image(img, &out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                input: rel,
                gt: gt_rel.clone(),
                label,
            });
        }
    }
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        ..manifest
    })
}
