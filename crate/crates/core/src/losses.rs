//! Training objective: L1, SSIM, a contrastive term and a perceptual term,
//! the last two measured in the feature space of a frozen random convnet.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, ParamBuilder, ParameterTree};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const CONTRASTIVE_EPS: f64 = 1e-7;

/// Seed of the feature network; fixed so losses are comparable across runs
/// and models.
const CRITIC_SEED: u64 = 0x5eed_c217;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub contrastive: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.7,
            ssim: 0.3,
            contrastive: 0.1,
            perceptual: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.contrastive, self.perceptual];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim: f64,
    pub contrastive: f64,
    pub perceptual: f64,
    pub total: f64,
}

fn check_same(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

pub fn l1_loss<'t>(out: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    check_same("l1_loss", &out, &gt)?;
    Ok(out.sub(gt)?.abs().mean())
}

/// Normalized 1D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Window length used for an `h × w` image: the standard 11, shrunk to the
/// largest odd size that fits smaller images.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM over all valid windows and channels of two `[H, W, C]` images.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_same("ssim", &a, &b)?;
    let shape = a.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: shape,
            rhs: vec![],
        });
    }
    let k = gaussian_kernel(ssim_window(shape[0], shape[1]), SSIM_SIGMA);
    let f = |v: Var<'t>| v.filter_separable_valid(&k);
    let mu_a = f(a)?;
    let mu_b = f(b)?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(mu_b)?;
    let s_aa = f(a.square())?.sub(mu_aa)?;
    let s_bb = f(b.square())?.sub(mu_bb)?;
    let s_ab = f(a.mul(b)?)?.sub(mu_ab)?;
    let num = mu_ab
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(s_ab.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_aa
        .add(mu_bb)?
        .add_scalar(SSIM_C1)
        .mul(s_aa.add(s_bb)?.add_scalar(SSIM_C2))?;
    Ok(num.div(den)?.mean())
}

pub fn ssim_loss<'t>(out: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    Ok(ssim(out, gt)?.neg().add_scalar(1.0))
}

/// Frozen three-stage random convnet whose activations define the feature
/// space of the perceptual and contrastive terms.
#[derive(Clone, Debug)]
pub struct CriticNet {
    stages: Vec<Conv2d>,
    params: ParameterTree,
}

impl Default for CriticNet {
    fn default() -> Self {
        Self::new()
    }
}

impl CriticNet {
    pub fn new() -> Self {
        let mut params = ParameterTree::new(CRITIC_SEED);
        let mut pb = ParamBuilder::new(&mut params, "critic");
        let stages = vec![
            Conv2d::new(&mut pb, "s0", (3, 8), 3, 1),
            Conv2d::new(&mut pb, "s1", (8, 16), 3, 2),
            Conv2d::new(&mut pb, "s2", (16, 32), 3, 2),
        ];
        Self { stages, params }
    }

    /// Activations after each stage.
    pub fn features<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let p = Bound::frozen(tape, &self.params);
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = s.forward(&p, h)?.tanh();
            out.push(h);
        }
        Ok(out)
    }
}

fn sum_vars<'t>(terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one term");
    it.try_fold(first, |acc, v| acc.add(v))
}

/// Mean squared feature difference, summed over the second and third stages.
pub fn perceptual_loss<'t>(critic: &CriticNet, out: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    check_same("perceptual_loss", &out, &gt)?;
    let tape = out.tape();
    let fo = critic.features(tape, out)?;
    let fg = critic.features(tape, gt)?;
    let terms = (1..3)
        .map(|s| Ok(fo[s].sub(fg[s])?.square().mean()))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(terms)
}

/// `Σ_stages mean|φ(out) − φ(gt)| / (mean|φ(out) − φ(neg)| + ε)`.
pub fn contrastive_loss<'t>(critic: &CriticNet, out: Var<'t>, gt: Var<'t>, neg: Var<'t>) -> Result<Var<'t>> {
    check_same("contrastive_loss", &out, &gt)?;
    check_same("contrastive_loss", &out, &neg)?;
    let tape = out.tape();
    let fo = critic.features(tape, out)?;
    let fg = critic.features(tape, gt)?;
    let fn_ = critic.features(tape, neg)?;
    let terms = (0..fo.len())
        .map(|s| {
            let pos = fo[s].sub(fg[s])?.abs().mean();
            let negd = fo[s].sub(fn_[s])?.abs().mean().add_scalar(CONTRASTIVE_EPS);
            pos.div(negd)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_vars(terms)
}

/// Weighted four-term objective.
#[derive(Clone, Debug, Default)]
pub struct TotalLoss {
    pub weights: LossWeights,
    pub critic: CriticNet,
}

impl TotalLoss {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            weights,
            critic: CriticNet::new(),
        }
    }

    pub fn forward<'t>(&self, out: Var<'t>, gt: Var<'t>, neg: Var<'t>) -> Result<(Var<'t>, LossBreakdown)> {
        let w = self.weights;
        let l1 = l1_loss(out, gt)?;
        let ss = ssim_loss(out, gt)?;
        let con = contrastive_loss(&self.critic, out, gt, neg)?;
        let per = perceptual_loss(&self.critic, out, gt)?;
        let total = l1
            .scale(w.l1)
            .add(ss.scale(w.ssim))?
            .add(con.scale(w.contrastive))?
            .add(per.scale(w.perceptual))?;
        let breakdown = LossBreakdown {
            l1: l1.item(),
            ssim: ss.item(),
            contrastive: con.item(),
            perceptual: per.item(),
            total: total.item(),
        };
        Ok((total, breakdown))
    }

    /// Evaluate on plain tensors.
    pub fn evaluate(&self, out: &Tensor, gt: &Tensor, neg: &Tensor) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let (_, b) = self.forward(
            tape.constant(out.clone()),
            tape.constant(gt.clone()),
            tape.constant(neg.clone()),
        )?;
        Ok(b)
    }
}

/// SSIM of two tensors.
pub fn ssim_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(ssim(tape.constant(a.clone()), tape.constant(b.clone()))?.item())
}

/// `10·log10(1 / MSE)` on unit range, capped at 99 for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, seed: usize) -> Tensor {
        let n = h * w * 3;
        Tensor::new(
            vec![h, w, 3],
            (0..n)
                .map(|i| 0.5 + 0.45 * ((i * (seed + 3)) as f64 * 0.13).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn l1_examples() {
        let tape = Tape::new();
        let a = img(4, 4, 1);
        let shifted = a.map(|v| v + 0.1);
        let l = l1_loss(tape.constant(shifted), tape.constant(a.clone())).unwrap();
        assert!((l.item() - 0.1).abs() < 1e-12);
        assert_eq!(l1_loss(tape.constant(a.clone()), tape.constant(a)).unwrap().item(), 0.0);
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = img(16, 16, 2);
        assert!((ssim_value(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (m1, m2) = (0.3, 0.55);
        let a = Tensor::full(&[12, 12, 3], m1);
        let b = Tensor::full(&[12, 12, 3], m2);
        let expected = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert!((ssim_value(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let n = 16;
        let a = Tensor::new(
            vec![n, n, 1],
            (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect(),
        )
        .unwrap();
        let b = a.map(|v| 1.0 - v);
        let s = ssim_value(&a, &b).unwrap();
        assert!(s < -0.9, "ssim {s}");
        assert!(1.0 - s > 1.0);
    }

    #[test]
    fn ssim_window_shrinks_for_small_images() {
        assert_eq!(ssim_window(64, 64), 11);
        assert_eq!(ssim_window(8, 64), 7);
        assert_eq!(ssim_window(9, 9), 9);
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[2, 2, 3], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn total_vanishes_at_ground_truth() {
        let loss = TotalLoss::default();
        let gt = img(16, 16, 4);
        let neg = gt.map(|v| v * 0.5);
        let b = loss.evaluate(&gt, &gt, &neg).unwrap();
        assert!(b.total.abs() < 1e-12, "{b:?}");
    }

    #[test]
    fn contrastive_blows_up_at_negative() {
        let loss = TotalLoss::default();
        let gt = img(16, 16, 5);
        let neg = gt.map(|v| v * 0.5);
        let b = loss.evaluate(&neg, &gt, &neg).unwrap();
        assert!(b.contrastive > 1e4);
    }

    #[test]
    fn contrastive_decreases_toward_ground_truth() {
        let loss = TotalLoss::default();
        let gt = img(16, 16, 6);
        let neg = gt.map(|v| v * 0.4);
        let at = |t: f64| {
            let out = neg.zip_map(&gt, |n, g| (1.0 - t) * n + t * g).unwrap();
            loss.evaluate(&out, &gt, &neg).unwrap().contrastive
        };
        let (a, b, c) = (at(0.0), at(0.5), at(1.0));
        assert!(a > b && b > c && c == 0.0, "{a} {b} {c}");
    }

    #[test]
    fn total_is_linear_in_weights() {
        let gt = img(16, 16, 7);
        let out = img(16, 16, 8);
        let neg = gt.map(|v| v * 0.3);
        let w = LossWeights::default();
        let double = LossWeights {
            l1: 2.0 * w.l1,
            ssim: 2.0 * w.ssim,
            contrastive: 2.0 * w.contrastive,
            perceptual: 2.0 * w.perceptual,
        };
        let a = TotalLoss::new(w).evaluate(&out, &gt, &neg).unwrap().total;
        let b = TotalLoss::new(double).evaluate(&out, &gt, &neg).unwrap().total;
        assert!((b - 2.0 * a).abs() < 1e-12 * b.abs().max(1.0));
    }
}
