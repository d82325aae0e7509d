//! Tape-based reverse-mode differentiation over tensor primitives.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! record keeps its output value, the handles of its inputs and a closure
//! that maps the output adjoint to input adjoints. [`Tape::backward`] walks
//! the records in reverse and accumulates adjoints additively over fan-out.
//!
//! Masks never enter the tape as differentiable values; primitives that
//! depend on them capture the mask (or quantities derived from it, such as
//! valid counts) as constants.
//!
//! ```
//! use pvm_core::autodiff::Tape;
//! use pvm_core::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod check;
mod ops;
mod optim;
mod suite;

use std::collections::BTreeMap;

pub use check::{grad_check, weighted_sum_loss, GradCheckReport, GRAD_CHECK_FLOOR};
pub use ops::PatchLayout;
pub use optim::{Adam, AdamConfig};
pub use suite::{check_primitives, PrimitiveCheck, GRAD_CHECK_STEP, PRIMITIVES};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a primitive's backward closure.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Whether each input needs an adjoint; closures may skip the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable input that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push_leaf(value, true);
        self.params.push((name.into(), v.0));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a primitive. The closure is dropped when no input needs an
    /// adjoint.
    pub fn push(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.dims().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect(),
            };
            let input_grads = backward(ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.dims(), self.nodes[j].value.dims(), "adjoint shape of node {j}");
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let mut params = BTreeMap::new();
        for (name, idx) in &self.params {
            if let Some(g) = &grads[*idx] {
                match params.get_mut(name) {
                    Some(acc) => Tensor::add_assign(acc, g),
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Adjoints of the leaves reached from the loss.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::DetachedParameter(name.to_string()))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}
