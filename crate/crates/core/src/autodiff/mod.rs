//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Tape`] records every operation performed through [`Var`] handles.
//! Each node keeps its forward value and, when any input requires a
//! gradient, a closure computing the vector-Jacobian product for its
//! parents. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because nodes are append-only.
//!
//! Tapes are single-threaded (`Rc` values, `RefCell` storage). Independent
//! passes build independent tapes, so read-only parameters can be shared
//! across threads while each thread owns its own tape.

mod ops;
mod scan;
mod spatial;

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::{BinaryOp, UnaryOp};
pub use scan::ScanOrder;

/// Storage precision of tape values. `F32` rounds every op result (and leaf)
/// to the nearest `f32`, emulating single-precision storage while keeping
/// `f64` arithmetic inside kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Self::F64),
            "f32" => Ok(Self::F32),
            other => Err(Error::InvalidConfig(format!("unknown precision `{other}`"))),
        }
    }
}

/// Vector-Jacobian product: receives the output gradient and a mask telling
/// which parents need a gradient; returns one entry per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: RefCell::default(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let value = self.round(value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn round(&self, mut value: Tensor) -> Tensor {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        value
    }

    /// Record an op result. The closure is dropped when no parent requires a
    /// gradient, so inference passes keep only values.
    pub(crate) fn push<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let value = self.round(value);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulate `d loss / d leaf` for every leaf that requires a gradient.
    ///
    /// Gradients add across multiple uses of a value. Leaves that do not
    /// reach `loss` get a zero gradient rather than an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaves.push(id);
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let leaf_grads = leaves
            .into_iter()
            .map(|id| {
                let shape = nodes[id].value.shape().to_vec();
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[id].value.numel()]);
                (id, Tensor::from_parts(shape, g))
            })
            .collect();
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: std::collections::HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf. `None` when the leaf does not require a gradient
    /// or was created after the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Copy of the value, detached from the graph.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value()).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x.exp()), Err(Error::NotScalar(_))));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.variable(Tensor::vector(vec![5.0]));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(y).data(), &[0.0]);
        assert_eq!(g.get(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![3.0]));
        let loss = x.add(x).unwrap().add(x).unwrap().sum();
        assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[3.0]);
    }

    #[test]
    fn constants_record_no_backward() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0]));
        let y = x.exp();
        assert!(!y.requires_grad());
    }

    #[test]
    fn f32_precision_rounds_values() {
        let tape = Tape::with_precision(Precision::F32);
        let x = tape.constant(Tensor::scalar(0.1));
        assert_eq!(x.item(), 0.1f32 as f64);
        assert_ne!(x.item(), 0.1);
    }
}
