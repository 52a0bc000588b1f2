//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParameterTree};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per input tensor; smaller tensors are probed fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the probed coordinates.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub probed: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.relative_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.checks
            .iter()
            .filter(|c| c.relative_error > self.tolerance)
    }
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(
        n.iter().map(|x| x * x).sum::<f64>().sqrt(),
    );
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Reduces an arbitrary output to a scalar with fixed random weights, so every
/// output element contributes a distinct direction.
fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn project<'t>(tape: &'t Tape, out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    out.mul(tape.constant(weights.clone()))
        .map(|v| v.sum())
}

/// Check every input of `f`. `f` maps input vars to an output of any shape.
pub fn check_fn<F>(inputs: &[(String, Tensor)], f: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|(_, t)| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let weights = projection(&out.shape(), cfg.seed);
    let loss = project(&tape, out, &weights)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("gradcheck loss".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(project(&tape, out, &weights)?.item())
    };

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, (name, tensor)) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_tensor).into_vec()
        };
        let mut a = Vec::with_capacity(coords.len());
        let mut num = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            num.push((plus - minus) / (2.0 * cfg.step));
            a.push(analytic[i].data()[j]);
        }
        let max_abs_error = a
            .iter()
            .zip(&num)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        checks.push(TensorCheck {
            name: name.clone(),
            relative_error: relative_error(&a, &num),
            max_abs_error,
            probed: coords.len(),
        });
    }
    Ok(GradcheckReport {
        checks,
        tolerance: cfg.tolerance,
    })
}

/// Check every parameter of `params` for a model forward `f`.
pub fn check_params<F>(
    params: &ParameterTree,
    f: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: for<'t, 'p> Fn(&Bound<'t, 'p>) -> Result<Var<'t>>,
{
    let names: Vec<String> = params.names().cloned().collect();
    let inputs: Vec<(String, Tensor)> = params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    check_fn(
        &inputs,
        |tape, vars| {
            let mut tree = ParameterTree::new(params.seed());
            for (name, v) in names.iter().zip(vars) {
                tree.insert(name.clone(), v.to_tensor());
            }
            // Rebind through the caller's vars so gradients flow to them.
            let bound = Bound::with_vars(tape, &tree, names.iter().cloned().zip(vars.iter().copied()));
            f(&bound)
        },
        cfg,
    )
}
