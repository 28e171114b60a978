use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Parameters placed on a graph, addressable by name.
pub struct Bound {
    order: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        let (names, order): (Vec<String>, Vec<Var>) = pairs.into_iter().unzip();
        let by_name = names.into_iter().zip(order.iter().copied()).collect();
        Self { order, by_name }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    /// Vars in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Put every tensor on `g` as a parameter leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let order: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        let by_name = self.names.iter().cloned().zip(order.iter().copied()).collect();
        Bound { order, by_name }
    }

    /// Same names and shapes as `other`.
    pub fn ensure_compatible<U>(&self, other: &ParamSet<U>) -> Result<()>
    where
        U: Scalar,
    {
        let same = self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Mismatch("parameter layouts differ".into()))
        }
    }
}

/// Helper that creates parameters with fan-in scaled uniform initialization.
pub(crate) struct Init<'a, T, R> {
    pub params: ParamSet<T>,
    pub rng: &'a mut R,
}

impl<'a, T: Scalar, R: Rng> Init<'a, T, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let t = Tensor::uniform(shape, bound, self.rng);
        self.params.push(name, t);
    }

    /// `{name}.w: [cout, cin/groups, k, k]` and `{name}.b: [cout]`.
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, groups: usize) {
        let fan_in = (cin / groups * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        self.uniform(&format!("{name}.w"), &[cout, cin / groups, k, k], bound);
        self.uniform(&format!("{name}.b"), &[cout], bound);
    }

    pub fn finish(self) -> ParamSet<T> {
        self.params
    }
}

/// Convolution with parameters `{name}.w` / `{name}.b`.
pub(crate) fn conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    cfg: crate::autodiff::Conv2dConfig,
) -> Result<Var> {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    g.conv2d(x, w, Some(b), cfg)
}
