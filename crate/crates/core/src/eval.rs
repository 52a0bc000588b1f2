//! Evaluation report: PSNR and SSIM grouped by exposure tag.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{psnr, ssim_value};
use crate::params::ParameterTree;
use crate::pipeline::Wecdg;
use crate::sdgm::{ExposureLabel, Sdgm};
use crate::train::Sample;

/// Full-scale numbers of the reference method, shown for orientation only.
pub const REFERENCE_RESULTS: [(&str, f64, f64); 2] = [("MSEC", 23.59, 0.8733), ("SICE", 23.31, 0.7286)];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

impl Metrics {
    pub fn between(out: &ImageBuffer, gt: &ImageBuffer) -> Result<Self> {
        Ok(Self {
            psnr: psnr(out.pixels(), gt.pixels())?,
            ssim: ssim_value(out.pixels(), gt.pixels())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelRow {
    pub label: String,
    pub count: usize,
    /// Restored output against the ground truth.
    pub output: Metrics,
    /// Unprocessed input against the ground truth.
    pub input: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub rows: Vec<LabelRow>,
    /// Mean over every evaluated image.
    pub average: LabelRow,
    /// Auto mode only: fraction of inputs whose matched class equals the
    /// class of their tag.
    pub classification_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn psnr_gain(&self) -> f64 {
        self.average.output.psnr - self.average.input.psnr
    }
}

/// Which descriptor each input gets.
pub enum DescriptorMode<'a> {
    /// From the sample's tag.
    Manual,
    /// From the descriptor module's match.
    Auto { sdgm: &'a Sdgm, params: &'a ParameterTree },
}

/// Restore every sample and score it. Averages are over per-image metrics.
pub fn evaluate(model: &Wecdg, params: &ParameterTree, samples: &[Sample], mode: &DescriptorMode) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mix = model.config.sdgm.mix_weight;
    let mut per_image = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    for s in samples {
        let out = match mode {
            DescriptorMode::Manual => model.correct_manual(params, &s.input, s.label.descriptor(mix))?,
            DescriptorMode::Auto { sdgm, params: sp } => {
                let (out, d, _) = model.correct_auto(params, sdgm, sp, &s.input)?;
                if d.label.dominant() == s.label.class(mix) {
                    correct += 1;
                }
                out
            }
        };
        per_image.push((s.label, Metrics::between(&out, &s.gt)?, Metrics::between(&s.input, &s.gt)?));
    }

    let summarize = |name: String, items: &[&(ExposureLabel, Metrics, Metrics)]| {
        let n = items.len() as f64;
        let mean = |f: &dyn Fn(&(ExposureLabel, Metrics, Metrics)) -> f64| items.iter().map(|x| f(x)).sum::<f64>() / n;
        LabelRow {
            label: name,
            count: items.len(),
            output: Metrics {
                psnr: mean(&|x| x.1.psnr),
                ssim: mean(&|x| x.1.ssim),
            },
            input: Metrics {
                psnr: mean(&|x| x.2.psnr),
                ssim: mean(&|x| x.2.ssim),
            },
        }
    };
    let mut labels: Vec<ExposureLabel> = Vec::new();
    for (l, _, _) in &per_image {
        if !labels.contains(l) {
            labels.push(*l);
        }
    }
    let rows = labels
        .iter()
        .map(|l| {
            let items: Vec<_> = per_image.iter().filter(|x| x.0 == *l).collect();
            summarize(l.as_str().to_string(), &items)
        })
        .collect();
    let all: Vec<_> = per_image.iter().collect();
    Ok(EvalReport {
        mode: match mode {
            DescriptorMode::Manual => "manual".into(),
            DescriptorMode::Auto { .. } => "auto".into(),
        },
        rows,
        average: summarize("average".into(), &all),
        classification_accuracy: match mode {
            DescriptorMode::Manual => None,
            DescriptorMode::Auto { .. } => Some(correct as f64 / samples.len() as f64),
        },
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "descriptor mode: {}", self.mode)?;
        writeln!(
            f,
            "{:<10} {:>6} {:>10} {:>8} {:>10} {:>8}",
            "label", "count", "psnr", "ssim", "in_psnr", "in_ssim"
        )?;
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            writeln!(
                f,
                "{:<10} {:>6} {:>10.4} {:>8.4} {:>10.4} {:>8.4}",
                r.label, r.count, r.output.psnr, r.output.ssim, r.input.psnr, r.input.ssim
            )?;
        }
        writeln!(f, "psnr gain over input: {:+.4} dB", self.psnr_gain())?;
        if let Some(acc) = self.classification_accuracy {
            writeln!(f, "descriptor match accuracy: {:.4}", acc)?;
        }
        write!(f, "reference (full-scale datasets, not targets):")?;
        for (name, p, s) in REFERENCE_RESULTS {
            write!(f, " {name} {p:.2}/{s:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ModelConfig;
    use crate::sdgm::SdgmConfig;
    use crate::tensor::Tensor;

    #[test]
    fn identity_model_reports_input_metrics() {
        let (model, params) = Wecdg::new(ModelConfig {
            base_channels: 4,
            unet_levels: 1,
            edrm_count: 1,
            descriptor_queries: 2,
            sdgm: SdgmConfig {
                dim: 6,
                ..SdgmConfig::default()
            },
            zero_init_outputs: true,
            ..ModelConfig::default()
        })
        .unwrap();
        let gt = ImageBuffer::new(Tensor::full(&[8, 8, 3], 0.5)).unwrap();
        let dark = ImageBuffer::new(Tensor::full(&[8, 8, 3], 0.4)).unwrap();
        let samples = vec![
            Sample {
                input: dark.clone(),
                gt: gt.clone(),
                label: ExposureLabel::Under,
            },
            Sample {
                input: gt.clone(),
                gt,
                label: ExposureLabel::Over,
            },
        ];
        let r = evaluate(&model, &params, &samples, &DescriptorMode::Manual).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!((r.rows[0].output.psnr - 20.0).abs() < 1e-9);
        assert_eq!(r.rows[1].output.psnr, 99.0);
        assert!((r.rows[1].output.ssim - 1.0).abs() < 1e-12);
        assert!((r.average.output.psnr - 59.5).abs() < 1e-9);
        assert_eq!(r.psnr_gain(), 0.0);
        let text = r.to_string();
        assert!(text.contains("SICE 23.31/0.7286"));
        assert!(matches!(
            evaluate(&model, &params, &[], &DescriptorMode::Manual),
            Err(Error::EmptyDataset)
        ));
    }
}
