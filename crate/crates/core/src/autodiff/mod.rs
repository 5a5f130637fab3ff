//! Per-forward-call reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, a backward rule. [`Tape::backward`] walks the
//! nodes in reverse and accumulates vector-Jacobian products into the
//! parents. There are no higher-order derivatives.

mod check;
mod fold;
mod loss;
mod nn;
mod ops;
mod spike;

pub use check::{finite_diff_check, FiniteDiffReport};
pub use fold::{fold_bn_into_conv, BnParams};
pub use nn::BatchStats;

use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward<T: Scalar> {
    /// Receives the gradient flowing into `out` and accumulates the
    /// contributions of its parents into `sink`.
    fn backward(&self, tape: &Tape<T>, out: Var, grad: &[T], sink: &mut GradSink<'_, T>);
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    label: &'static str,
    requires_grad: bool,
    is_leaf: bool,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(contract(format!("constant of shape {:?} given {} values", shape, value.len())));
        }
        Ok(self.push_leaf(shape.to_vec(), value, false))
    }

    /// Records a trainable leaf from raw parts.
    pub fn variable(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(contract(format!("variable of shape {:?} given {} values", shape, value.len())));
        }
        Ok(self.push_leaf(shape.to_vec(), value, true))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, label: "leaf", requires_grad, is_leaf: true, parents: Vec::new(), op: None });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        label: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.nodes.push(Node { shape, value, label, requires_grad, is_leaf: false, parents: parents.to_vec(), op });
        Var(self.nodes.len() - 1)
    }

    /// Operands the node was computed from.
    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn label(&self, v: Var) -> &'static str {
        self.nodes[v.0].label
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes keep shape and value consistent")
    }

    /// First recorded node (in execution order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|x| !x.is_finite()))
            .map(|(i, n)| (Var(i), n.label))
    }

    /// Back-propagates from a scalar output, seeding its gradient with one.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].shape
            )));
        }
        self.backward_with(output, vec![T::one()])
    }

    /// Back-propagates an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(contract("seed gradient does not match the output length"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let mut sink = GradSink { tape: self, grads: &mut grads };
                op.backward(self, Var(i), &g, &mut sink);
            }
            if node.is_leaf {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Accumulates parent gradients during the backward sweep.
pub(crate) struct GradSink<'a, T: Scalar> {
    tape: &'a Tape<T>,
    grads: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradSink<'_, T> {
    /// Zero-initialised accumulation buffer for `v`, or `None` when `v` does
    /// not participate in differentiation.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.tape.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.tape.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    pub(crate) fn add(&mut self, v: Var, contribution: &[T]) {
        if let Some(slot) = self.slot(v) {
            for (s, &c) in slot.iter_mut().zip(contribution) {
                *s += c;
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zero-filled when nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
