use std::cell::{Ref, RefCell};

use super::ops::{self, Op};
use super::{Tensor, TensorError, TensorResult};

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between backward calls.
    pub(crate) grad: Option<Vec<f64>>,
}

/// Gradient tape for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and the insertion order is a topological order. Create a tape per
/// forward pass and drop it after the gradients have been read out.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, grad: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    pub(crate) fn owns(&self, var: Var<'_>) -> bool {
        std::ptr::eq(self, var.tape)
    }

    /// Accumulated gradient of a leaf, `None` if it never received one.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        assert!(self.owns(var), "variable from another tape");
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d(root)/d(leaf) into every trainable leaf reachable from
    /// `root`. Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, root: Var<'_>) -> TensorResult<()> {
        if !self.owns(root) {
            return Err(TensorError::DetachedRoot);
        }
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root_node = &nodes[root.id];
            if !root_node.value.shape().is_empty() {
                return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
            }
            if !root_node.requires_grad {
                return Ok(());
            }
            let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
            grads.resize_with(root.id + 1, || None);
            grads[root.id] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();
            for id in (0..=root.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                ops::backward(&nodes, id, &g, &mut |input, contrib: Vec<f64>| {
                    if !nodes[input].requires_grad {
                        return;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}
