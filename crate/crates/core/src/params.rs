//! Named parameter storage shared by every trainable component.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named, gradient-tracking tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a [`ParamSet`], valid for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binds tape values to parameters by store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.requiring_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Mutable access to the parameters whose ids are in `ids`, in store order.
    pub fn select_mut<'a>(&'a mut self, ids: &'a [ParamId]) -> impl Iterator<Item = &'a mut Tensor> + 'a {
        self.tensors.iter_mut().enumerate().filter(move |(i, _)| ids.contains(&ParamId(*i))).map(|(_, t)| t)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Adds the tape gradients of every bound parameter into its gradient buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Rounds every value to the nearest 32-bit float (the checkpoint precision).
    pub fn round_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as Real);
        }
    }

    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (n.to_string(), Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()))).collect()
    }

    /// Overwrites values from named tensors; every parameter must be present
    /// with its exact shape.
    pub fn import(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            let src = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
    uniform(shape, bound, rng)
}

/// Uniform in `±sqrt(6 / fan_in)`, suited to ReLU layers.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    uniform(shape, (6.0 / fan_in as Real).sqrt(), rng)
}

fn uniform(shape: &[usize], bound: Real, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

pub fn normal(shape: &[usize], std: Real, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}
