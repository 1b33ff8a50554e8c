//! Dense row-major tensors, the neural primitives the encoder needs, and the
//! ADAM optimizer.
//!
//! Training runs in `f32`; gradient-check oracles instantiate the same code
//! with `f64`, so everything here is generic over [`Real`].

mod adam;
mod ops;

pub use adam::{adam_step, AdamState};
pub use ops::*;

use crate::error::{Error, Result};

/// Scalar types the numeric core runs on (`f32` for training, `f64` for
/// gradient-check oracles).
pub trait Real:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major numeric array. The unit of all computation and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that `shape` and `data` agree.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Extents of a rank-2 tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected rank-2 tensor, got {other:?}"))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a trainable parameter and allocates its gradient
    /// buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        self.grad
            .as_deref_mut()
            .expect("gradient buffer not allocated; call with_grad() first")
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        let g = self.grad_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts element-by-element into another scalar type (f32 <-> f64).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }
}
