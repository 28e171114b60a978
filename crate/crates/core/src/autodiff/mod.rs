//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Inference code builds the same graph with recording disabled, so no
//! backward closures are kept.

mod conv;
mod loss;
mod ops;
mod spectral;

pub use conv::Conv2dConfig;
pub use loss::KlDirection;
pub use spectral::{retained_rows, spectral_weight_shape};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&[Node<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send>;

pub(crate) struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Node<T> {
    pub(crate) fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only graph: values are computed, nothing is recorded.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient (a trainable parameter).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let rg = self.record;
        self.leaf(value, rg)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Push an op result. The closure receives all nodes, the upstream gradient
    /// and a per-parent flag telling which parent gradients are needed.
    pub(crate) fn push<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[Node<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + 'static,
    {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = bw(&self.nodes, &upstream, &needs);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(g) = g {
                    match grads[p].as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => grads[p] = Some(g),
                    }
                }
            }
            grads[idx] = Some(upstream);
        }
        Gradients { grads }
    }
}
