//! Restoration training loop.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::{crop_and_augment, load_image, CropConfig, DatasetManifest};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{LossBreakdown, LossWeights, TotalLoss};
use crate::optim::{Adam, AdamConfig};
use crate::params::{accumulate_grads, Bound, GradMap, ParameterTree};
use crate::pipeline::Wecdg;
use crate::sdgm::{ExposureLabel, Sdgm, SdgmTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub crop: CropConfig,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Emit a log record every this many steps (the last step always logs).
    pub log_every: usize,
    pub sdgm: SdgmTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            steps: 2000,
            lr: 1e-3,
            batch: 1,
            seed: 0,
            weights: LossWeights::default(),
            log_every: 50,
            sdgm: SdgmTrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.crop.validate()?;
        self.weights.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A degraded input, its ground truth and the tag that picks the descriptor.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: ImageBuffer,
    pub gt: ImageBuffer,
    pub label: ExposureLabel,
}

/// Load every degraded pair of a manifest. Entries tagged `GT` are the
/// identity pair and are skipped.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for e in manifest.degraded() {
        let input = load_image(&manifest.input_path(e))?;
        let gt = load_image(&manifest.gt_path(e))?;
        if input.pixels().shape() != gt.pixels().shape() {
            return Err(Error::ShapeMismatch {
                op: "dataset pair",
                lhs: input.pixels().shape().to_vec(),
                rhs: gt.pixels().shape().to_vec(),
            });
        }
        out.push(Sample {
            input,
            gt,
            label: e.label,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "step={} total={:.6} l1={:.6} ssim={:.6} contrastive={:.6} perceptual={:.6}",
            self.step, l.total, l.l1, l.ssim, l.contrastive, l.perceptual
        )
    }
}

/// Per-step batch-mean losses.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<LossBreakdown>,
}

impl TrainReport {
    pub fn totals(&self) -> Vec<f64> {
        self.history.iter().map(|b| b.total).collect()
    }

    /// Mean total over the first and last `window` steps.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let t = self.totals();
        let w = window.min(t.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&t[..w]), mean(&t[t.len() - w..])))
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, scale: f64) {
    acc.l1 += scale * b.l1;
    acc.ssim += scale * b.ssim;
    acc.contrastive += scale * b.contrastive;
    acc.perceptual += scale * b.perceptual;
    acc.total += scale * b.total;
}

/// Train the restoration network on degraded pairs with teacher-forced
/// descriptors. Only `net.*` parameters move; the text embedder is held
/// fixed so descriptors stay those of the descriptor module.
pub fn train(
    model: &Wecdg,
    params: &mut ParameterTree,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mix = model.config.sdgm.mix_weight;
    let mut descriptors = HashMap::new();
    for s in samples {
        if let std::collections::hash_map::Entry::Vacant(slot) = descriptors.entry(s.label) {
            slot.insert(model.descriptor(params, s.label.descriptor(mix))?.embedding);
        }
    }
    let loss_fn = TotalLoss::new(cfg.weights);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut grads = GradMap::new();
        let mut mean = LossBreakdown::default();
        let scale = 1.0 / cfg.batch as f64;
        for _ in 0..cfg.batch {
            let s = &samples[rng.gen_range(0..samples.len())];
            let (x, gt) = crop_and_augment(&s.input, &s.gt, &cfg.crop, &mut rng)?;
            let tape = model.tape();
            let p = Bound::new(&tape, params);
            let xv = tape.constant(x.into_pixels());
            let out = model.forward_var(&p, xv, tape.constant(descriptors[&s.label].clone()))?;
            let (loss, b) = loss_fn.forward(out, tape.constant(gt.into_pixels()), xv)?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step} (l1={} ssim={} contrastive={} perceptual={})",
                    b.l1, b.ssim, b.contrastive, b.perceptual
                )));
            }
            let g = p.grads(&tape.backward(loss)?);
            accumulate_grads(&mut grads, &g, scale);
            add_breakdown(&mut mean, &b, scale);
        }
        for (name, g) in grads.iter_mut() {
            if !Wecdg::is_network_param(name) {
                g.data_mut().fill(0.0);
            }
        }
        adam.step(params, &grads)?;
        report.history.push(mean);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            on_log(&StepLog { step, loss: mean });
        }
    }
    Ok(report)
}

/// Class-labelled images for the descriptor module: each degraded input with
/// its tag's class, plus each distinct ground truth as well-exposed.
pub fn sdgm_samples(samples: &[Sample], mix_weight: f64) -> Vec<(ImageBuffer, crate::sdgm::ExposureClass)> {
    let mut out = Vec::new();
    let mut seen_gt: Vec<&ImageBuffer> = Vec::new();
    for s in samples {
        out.push((s.input.clone(), s.label.class(mix_weight)));
        if !seen_gt.iter().any(|g| g.pixels() == s.gt.pixels()) {
            seen_gt.push(&s.gt);
            out.push((s.gt.clone(), crate::sdgm::ExposureClass::WellExposed));
        }
    }
    out
}

/// Train the descriptor module and return its epoch losses.
pub fn train_descriptor_module(
    sdgm: &Sdgm,
    params: &mut ParameterTree,
    samples: &[Sample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let data = sdgm_samples(samples, sdgm.config.mix_weight);
    crate::sdgm::train_sdgm(sdgm, params, &data, &cfg.sdgm, cfg.seed, on_epoch)
}
