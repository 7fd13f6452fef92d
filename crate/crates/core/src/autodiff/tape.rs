//! Define-by-run reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its value, its input
//! handles, and (when any input needs a gradient) a closure computing the
//! vector-Jacobian product. Nodes are appended in evaluation order, so the
//! node list is already a topological order and the backward pass is a
//! single reverse sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one node.
///
/// Receives the upstream gradient, the input values, the node's own value
/// and a per-input flag telling which input gradients are wanted. Returns
/// one entry per input; `None` for inputs that were not requested.
pub type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf (a parameter or an input we want
    /// gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation node. The closure is dropped when none of the
    /// inputs needs a gradient.
    pub fn record(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.push(value, inputs.iter().map(|v| v.0).collect(), backward, requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = backward(&grad, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            // Keep gradients of leaves only; intermediate ones were consumed.
            grads[id] = None;
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the backward root with respect to recorded leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
