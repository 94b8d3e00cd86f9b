//! Dense row-major n-dimensional tensor with an optional gradient slot.

use crate::scalar::Scalar;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { context: String, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("gradient missing for parameter {0}")]
    MissingGradient(String),
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense tensor. `data` is row-major; `grad`, when present, has the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); n], grad: None }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    /// Uniform in `[-limit, limit]`.
    pub fn uniform<R: Rng>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.gen_range(-limit..=limit)))
            .collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (f32 <-> f64). Gradient slot is dropped.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(Scalar::to_f64(v))).collect(),
            grad: None,
        }
    }

    pub fn same_shape(&self, other: &Tensor<S>, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                context: context.to_string(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}
