//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradMap, ParameterTree};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: step count and first/second moments per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter of `params`. Every parameter needs
    /// an entry in `grads`.
    pub fn step(&mut self, params: &mut ParameterTree, grads: &GradMap) -> Result<()> {
        for name in params.names() {
            match grads.get(name) {
                Some(g) if g.shape() == params.get(name).map(|p| p.shape()).unwrap_or(&[]) => {}
                Some(g) => {
                    return Err(Error::ShapeMismatch {
                        op: "adam",
                        lhs: params.get(name).unwrap().shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                None => return Err(Error::MissingGrad(name.clone())),
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads[&name].data();
            let p = params.get_mut(&name).expect("name from tree");
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParameterTree {
        let mut t = ParameterTree::new(0);
        t.insert("w", Tensor::scalar(value));
        t
    }

    fn grad(value: f64) -> GradMap {
        [("w".to_string(), Tensor::scalar(value))].into_iter().collect()
    }

    #[test]
    fn paper_default_betas() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = single(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg);
        adam.step(&mut p, &grad(1.0)).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expected = -0.1 * (1.0 / (1.0 + cfg.eps));
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut p = single(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut p, &GradMap::new()),
            Err(Error::MissingGrad(n)) if n == "w"
        ));
        assert_eq!(adam.steps_taken(), 0);
    }
}
