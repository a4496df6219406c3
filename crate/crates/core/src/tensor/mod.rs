//! Dense row-major tensors and the reverse-mode tape that differentiates them.

mod autograd;
mod checkpoint;
pub(crate) mod kernels;
mod optim;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, OptimizerSection};
pub use optim::{Adam, AdamConfig, LrSchedule, Optimizer, OptimizerKind, Sgd, SgdConfig};

use crate::error::{shape_err, Error, Result};

/// Element type used by every tensor.
pub type Real = f64;

/// A dense tensor with an optional gradient buffer.
///
/// Rank-0 tensors (empty shape) hold a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err("tensor", format!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    /// Internal constructor for buffers whose shape has already been checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: Real) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Same data, gradient tracking enabled (and zeroed).
    pub fn requiring_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.grad = if on { Some(vec![0.0; self.data.len()]) } else { None };
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [Real]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op when gradients are off.
    pub fn accumulate_grad(&mut self, delta: &[Real]) {
        if let Some(g) = &mut self.grad {
            debug_assert_eq!(g.len(), delta.len());
            for (g, d) in g.iter_mut().zip(delta) {
                *g += d;
            }
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> Real {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: Real) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[Real] {
        let n = *self.shape.last().expect("row of a scalar");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}
