//! Named trainable tensors and their binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Hierarchical (dot-separated) collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterTree {
    entries: BTreeMap<String, Tensor>,
    seed: u64,
}

impl ParameterTree {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Insert or replace an entry.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entries under `prefix.`, with names kept intact.
    pub fn subtree(&self, prefix: &str) -> ParameterTree {
        let dotted = format!("{prefix}.");
        ParameterTree {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(&dotted))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            seed: self.seed,
        }
    }

    /// Copy every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &ParameterTree) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Overwrite values from `source` for every name both trees share.
    /// Names present here but absent in `source` are reported.
    pub fn load_from(&mut self, source: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in self.entries.iter_mut() {
            let src = source
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))?;
            if src.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    lhs: value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *value = src.clone();
        }
        Ok(())
    }

    pub fn into_entries(self) -> BTreeMap<String, Tensor> {
        self.entries
    }
}

/// How a new parameter is filled.
#[derive(Clone, Debug)]
pub enum Init {
    /// `U(-sqrt(1/fan_in), +sqrt(1/fan_in))`.
    Uniform { fan_in: usize },
    /// `U(-bound, +bound)`.
    UniformBound(f64),
    Zeros,
    Constant(f64),
    Value(Tensor),
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Per-parameter generator, so adding a parameter never shifts the values
/// of the others.
pub fn param_rng(seed: u64, name: &str) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ name_hash(name))
}

/// Registers parameters under a name prefix.
pub struct ParamBuilder<'a> {
    tree: &'a mut ParameterTree,
    prefix: String,
    zero_outputs: bool,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(tree: &'a mut ParameterTree, prefix: &str) -> Self {
        Self {
            tree,
            prefix: prefix.to_string(),
            zero_outputs: false,
        }
    }

    /// Make [`ParamBuilder::add_output`] create zeros, turning every
    /// residual block built through this builder into an identity map.
    pub fn zero_outputs(mut self, yes: bool) -> Self {
        self.zero_outputs = yes;
        self
    }

    pub fn child(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.join(name);
        ParamBuilder {
            tree: &mut *self.tree,
            prefix,
            zero_outputs: self.zero_outputs,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Register a parameter and return its full name. Panics on duplicate
    /// names, which indicate a model-construction bug.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> String {
        let full = self.join(name);
        assert!(!self.tree.contains(&full), "duplicate parameter `{full}`");
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Uniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = param_rng(self.tree.seed, &full);
                Tensor::from_parts(
                    shape.to_vec(),
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
                )
            }
            Init::UniformBound(bound) => {
                let mut rng = param_rng(self.tree.seed, &full);
                Tensor::from_parts(
                    shape.to_vec(),
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
                )
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Value(t) => {
                assert_eq!(t.shape(), shape, "init value shape for `{full}`");
                t
            }
        };
        self.tree.insert(full.clone(), value);
        full
    }

    /// Like [`ParamBuilder::add`], but zero-filled when the builder is in
    /// zero-output mode. Used for the last projection of residual branches.
    pub fn add_output(&mut self, name: &str, shape: &[usize], init: Init) -> String {
        let init = if self.zero_outputs { Init::Zeros } else { init };
        self.add(name, shape, init)
    }
}

/// Parameters bound lazily onto a tape for one forward pass.
pub struct Bound<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParameterTree,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
    trainable: bool,
}

impl<'t, 'p> Bound<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParameterTree) -> Self {
        Self {
            tape,
            params,
            vars: RefCell::default(),
            trainable: true,
        }
    }

    /// Bind as constants: no gradients are recorded for these parameters.
    pub fn frozen(tape: &'t Tape, params: &'p ParameterTree) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, params)
        }
    }

    /// Bind with some parameters already on the tape.
    pub fn with_vars(
        tape: &'t Tape,
        params: &'p ParameterTree,
        vars: impl IntoIterator<Item = (String, Var<'t>)>,
    ) -> Self {
        Self {
            vars: RefCell::new(vars.into_iter().collect()),
            ..Self::new(tape, params)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParameterTree {
        self.params
    }

    /// The tape variable for `name`. Panics when the parameter does not
    /// exist, which indicates a mismatch between a module and its tree.
    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let var = self.tape.leaf(value, self.trainable);
        self.vars.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradient for every parameter of the tree; parameters that were never
    /// bound or do not reach the loss get zeros.
    pub fn grads(&self, grads: &Gradients) -> GradMap {
        let vars = self.vars.borrow();
        self.params
            .iter()
            .map(|(name, value)| {
                let g = vars
                    .get(name)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros_like(value));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Elementwise `acc += scale * g` over matching names.
pub fn accumulate_grads(acc: &mut GradMap, g: &GradMap, scale: f64) {
    for (name, t) in g {
        match acc.get_mut(name) {
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(x, y)| *x += scale * y),
            None => {
                acc.insert(name.clone(), t.map(|v| v * scale));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64) -> ParameterTree {
        let mut tree = ParameterTree::new(seed);
        let mut pb = ParamBuilder::new(&mut tree, "net");
        let mut l0 = pb.child("0");
        l0.add("w", &[4, 3], Init::Uniform { fan_in: 4 });
        l0.add("b", &[3], Init::Zeros);
        pb.add_output("out", &[3, 2], Init::Uniform { fan_in: 3 });
        tree
    }

    #[test]
    fn names_are_hierarchical() {
        let tree = build(1);
        let names: Vec<_> = tree.names().cloned().collect();
        assert_eq!(names, vec!["net.0.b", "net.0.w", "net.out"]);
        assert_eq!(tree.num_scalars(), 12 + 3 + 6);
    }

    #[test]
    fn initialization_is_deterministic_and_bounded() {
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
        let tree = build(5);
        let bound = 0.5;
        assert!(tree.get("net.0.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(tree.get("net.0.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_mode() {
        let mut tree = ParameterTree::new(0);
        let mut pb = ParamBuilder::new(&mut tree, "").zero_outputs(true);
        pb.add_output("proj", &[2, 2], Init::Uniform { fan_in: 2 });
        pb.add("w", &[2], Init::Constant(1.0));
        assert!(tree.get("proj").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(tree.get("w").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut tree = ParameterTree::new(0);
        let mut pb = ParamBuilder::new(&mut tree, "x");
        pb.add("w", &[1], Init::Zeros);
        pb.add("w", &[1], Init::Zeros);
    }

    #[test]
    fn unbound_parameters_get_zero_grads() {
        let tree = build(2);
        let tape = Tape::new();
        let bound = Bound::new(&tape, &tree);
        let loss = bound.get("net.0.b").sum();
        let grads = bound.grads(&tape.backward(loss).unwrap());
        assert_eq!(grads.len(), 3);
        assert_eq!(grads["net.0.b"].data(), &[1.0; 3]);
        assert!(grads["net.out"].data().iter().all(|&v| v == 0.0));
    }
}
