use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Computes parent gradients from the gradient of a node's output.
///
/// The `needs` mask says which parents want a gradient; entries for the
/// others may be `None`.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>>>;

struct Node<E: Element> {
    value: Arc<Tensor<E>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<E>>,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor<E>>,
}

/// Tape of recorded operations.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order and `backward` is a single reverse sweep. Gradients of
/// leaves accumulate across repeated `backward` calls until `zero_grad`;
/// intermediate gradients are recomputed on every call.
pub struct Graph<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<'_, E> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<E>>, requires_grad: bool) -> Var<'_, E> {
        self.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: None,
        })
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, false)
    }

    fn push(&self, node: Node<E>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Appends an op result. The backward closure is dropped unless some
    /// parent requires a gradient.
    pub(crate) fn record<F>(
        &self,
        value: Tensor<E>,
        parents: &[Var<'_, E>],
        backward: F,
    ) -> Var<'_, E>
    where
        F: Fn(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            grad: None,
        })
    }

    fn value(&self, id: usize) -> Arc<Tensor<E>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var<'_, E>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        if !root_value.all_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(root_value.shape().to_vec(), E::one()));
        let mut leaf_grads = Vec::new();

        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => leaf_grads.push((id, grad)),
                Some(f) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let parent_grads = f(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(g) = g else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any flowed to it.
    pub fn grad(&self, v: Var<'_, E>) -> Option<Tensor<E>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Like [`Graph::grad`] but zero-filled when nothing reached the leaf.
    pub fn grad_or_zero(&self, v: Var<'_, E>) -> Tensor<E> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(v.value().shape().to_vec()))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, E: Element = f32> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph<E>,
}

impl<E: Element> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<E: Element> Copy for Var<'_, E> {}

impl<E: Element> fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'g, E: Element> Var<'g, E> {
    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<E>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn item(&self) -> E {
        self.value().item()
    }

    /// Same value, cut out of the gradient flow.
    pub fn detach(&self) -> Var<'g, E> {
        self.graph.leaf_shared(self.value(), false)
    }
}
