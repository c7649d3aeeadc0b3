//! Reverse-mode recording.
//!
//! Every op is a method on [`Tape`]. An op whose inputs all lack
//! `requires_grad` produces a detached value and records nothing, so pure
//! inference frees intermediates as soon as their [`Var`] handles drop.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{self, Op};
use crate::tensor::Tensor;

pub(crate) struct Node<T: Element> {
    pub(crate) id: usize,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<T>>,
    pub(crate) inputs: Vec<Var<T>>,
}

/// Handle to a value produced on a [`Tape`].
#[derive(Clone)]
pub struct Var<T: Element = f32>(pub(crate) Rc<Node<T>>);

impl<T: Element> Var<T> {
    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.0.value.data()[0]
    }
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Gradients of the trainable leaves reached by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_id: HashMap<usize, Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&[T]> {
        self.by_id.get(&var.id()).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Vec<T>> {
        self.by_id.remove(&var.id())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Ordered record of differentiable ops.
///
/// Nodes are appended at creation time, after all of their inputs, so
/// reverse insertion order is a valid reverse topological order.
pub struct Tape<T: Element = f32> {
    next_id: Cell<usize>,
    nodes: RefCell<Vec<Var<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            next_id: Cell::new(0),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn fresh_id(&self) -> usize {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        id
    }

    /// Adds a leaf. It is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<T> {
        let requires_grad = tensor.requires_grad();
        let var = Var(Rc::new(Node {
            id: self.fresh_id(),
            value: tensor.with_requires_grad(false),
            requires_grad,
            op: None,
            inputs: Vec::new(),
        }));
        if requires_grad {
            self.nodes.borrow_mut().push(var.clone());
        }
        var
    }

    /// Adds a copy of `tensor` as a leaf, keeping its `requires_grad` flag.
    pub fn param(&self, tensor: &Tensor<T>) -> Var<T> {
        let copy = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec())
            .with_requires_grad(tensor.requires_grad());
        self.leaf(copy)
    }

    /// Adds a non-trainable leaf.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<T> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub(crate) fn record(&self, value: Tensor<T>, inputs: Vec<Var<T>>, op: Op<T>) -> Var<T> {
        let requires_grad = inputs.iter().any(Var::requires_grad);
        let (op, inputs) = if requires_grad {
            (Some(op), inputs)
        } else {
            (None, Vec::new())
        };
        let var = Var(Rc::new(Node {
            id: self.fresh_id(),
            value,
            requires_grad,
            op,
            inputs,
        }));
        if requires_grad {
            self.nodes.borrow_mut().push(var.clone());
        }
        var
    }

    /// Back-propagates from a one-element `loss` and clears the tape.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if !loss.requires_grad() {
            return Ok(Gradients::default());
        }

        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(loss.id(), vec![T::one()]);
        let mut leaves = HashMap::new();

        for node in nodes.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            let Some(op) = &node.0.op else {
                leaves.insert(node.id(), grad);
                continue;
            };
            let input_grads = ops::backward(op, &node.0.inputs, &node.0.value, &grad);
            debug_assert_eq!(input_grads.len(), node.0.inputs.len());
            for (input, g) in node.0.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.value().numel());
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        pending.insert(input.id(), g);
                    }
                }
            }
        }
        Ok(Gradients { by_id: leaves })
    }
}
