//! Computation tape: forward values plus per-node backward closures.

use super::{Tensor, TensorError};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(super) usize);

/// Computes gradient contributions for each parent given the node's output
/// gradient. Entries are `None` for parents that do not require gradients.
pub(super) type BackwardFn = Box<dyn FnOnce(&Tensor) -> Vec<Option<Tensor>>>;

pub(super) struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    pub(super) inner: RefCell<TapeInner>,
}

#[derive(Default)]
pub(super) struct TapeInner {
    pub(super) nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers an input node. Gradients are retained after `backward` only
    /// for leaves with `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            grad: None,
            parents: Vec::new(),
            needs_grad: requires_grad,
            backward: None,
        });
        Var(inner.nodes.len() - 1)
    }

    /// Registers a value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub(super) fn push(
        &self,
        value: Tensor,
        parents: &[Var],
        backward: impl FnOnce(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let needs_grad = parents.iter().any(|p| inner.nodes[p.0].needs_grad);
        let parents: Vec<usize> = parents.iter().map(|p| p.0).collect();
        inner.nodes.push(Node {
            value,
            grad: None,
            parents,
            needs_grad,
            backward: if needs_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(inner.nodes.len() - 1)
    }

    /// Cheap (shared-storage) copy of a node's value.
    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].needs_grad
    }

    /// Gradient accumulated at a leaf by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.inner.borrow().nodes[v.0].grad.clone()
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Reverse sweep from a scalar loss. Gradient contributions accumulate by
    /// addition into each parent; intermediate gradients are dropped once
    /// consumed, leaf gradients remain readable via [`Tape::grad`]. A tape
    /// supports exactly one backward pass.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.consumed = true;
        let loss_node = &inner.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(
                loss_node.value.shape().to_vec(),
            ));
        }
        let seed_shape = loss_node.value.shape().to_vec();
        inner.nodes[loss.0].grad = Some(Tensor::filled(&seed_shape, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &mut inner.nodes[id];
            let Some(backward) = node.backward.take() else {
                continue;
            };
            // Nodes outside the loss's ancestry never receive a gradient.
            let Some(grad) = node.grad.take() else {
                continue;
            };
            let parents = node.parents.clone();
            let contributions = backward(&grad);
            debug_assert_eq!(contributions.len(), parents.len());
            for (pid, contribution) in parents.into_iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                debug_assert_eq!(c.shape(), inner.nodes[pid].value.shape());
                match &mut inner.nodes[pid].grad {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// True if a parent at `v` requires gradients; used by ops to skip
    /// computing input gradients nobody will read.
    pub(super) fn parent_needs(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].needs_grad
    }
}
