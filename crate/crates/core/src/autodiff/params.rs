use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, kept in name order so iteration (and therefore
/// checkpoints and optimizer updates) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant, for forward-only passes.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameter handles for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles created elsewhere, e.g. leaves made by a gradient checker.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
    }

    /// Gradient per parameter name; parameters the root does not depend on
    /// get zeros.
    pub fn collect(&self, tape: &Tape, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}
