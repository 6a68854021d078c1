//! Reverse-mode gradient tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! a vector-Jacobian closure. [`Tape::backward`] walks the nodes in exact
//! reverse execution order and accumulates gradients into the parents.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Vector-Jacobian product: receives the output gradient and, per parent,
/// whether that parent needs a gradient; returns one entry per parent.
pub(crate) type Backward<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NodeKind {
    Param,
    Constant,
    Op(&'static str),
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    kind: NodeKind,
    requires_grad: bool,
}

/// Single-writer record of the operations executed during one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, NodeKind::Param)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, NodeKind::Constant)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor<T>, kind: NodeKind) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            kind,
            requires_grad: kind == NodeKind::Param,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push_op(
        &self,
        name: &'static str,
        value: Tensor<T>,
        parents: &[usize],
        backward: Backward<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            kind: NodeKind::Op(name),
            requires_grad,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must hold one value, got shape {:?}", root.value.shape()),
            });
        }
        root.value.ensure_finite("loss")?;

        let mut pending: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let mut params: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        pending[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else { continue };
            let node = &nodes[id];
            match (&node.backward, node.kind) {
                (_, NodeKind::Param) => params[id] = Some(grad),
                (Some(vjp), NodeKind::Op(name)) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = vjp(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{name}");
                    for (&p, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), nodes[p].value.shape(), "{name}");
                        match &mut pending[p] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                _ => {}
            }
        }

        let grads = nodes
            .iter()
            .zip(params)
            .map(|(node, g)| match node.kind {
                NodeKind::Param => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        let ops: Vec<_> = nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Param => "param",
                NodeKind::Constant => "const",
                NodeKind::Op(name) => name,
            })
            .collect();
        f.debug_struct("Tape").field("nodes", &ops).finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter leaf. Panics if `var` is not a parameter of
    /// the tape that produced these gradients.
    pub fn wrt(&self, var: Var<'_, T>) -> &Tensor<T> {
        self.grads[var.id].as_ref().expect("gradient requested for a non-parameter node")
    }

    /// Number of parameter leaves that received a gradient.
    pub fn param_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}
