//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Every differentiable computation in this crate is expressed as a chain of
//! [`Tape`] operations over `f64` buffers. A forward pass records one node per
//! operation; [`Tape::backward`] replays the record once in reverse and
//! accumulates gradients for every node, including the leaves that hold model
//! parameters. The tape is deliberately small: batched matmul, pointwise
//! arithmetic with right-aligned broadcasting, a handful of activations,
//! softmax variants, and shape plumbing (reshape / permute / slice / stack).
//! That set is enough to express the whole forecaster while keeping every
//! backward rule simple enough to verify against central differences.

mod check;
mod tape;

pub use check::{grad_check, grad_check_many};
pub use tape::{Tape, TensorId};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes are incompatible for the attempted operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A NaN or infinity was found at the given flat offset.
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    /// Input lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    DomainError(String),
    /// `backward` needs a scalar loss; the given tensor has more elements.
    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),
    /// The tensor id does not refer to a live node on this tape, or the tape
    /// has already been consumed by a previous `backward` call.
    #[error("tensor is not attached to a live tape")]
    DetachedTensor,
}

/// Number of elements implied by a shape. The empty shape is a scalar.
pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense row-major tensor of `f64` values.
///
/// Tensors own their storage. Placing one on a [`Tape`] copies the values
/// into a leaf node; after `backward`, the gradient can be read back into the
/// `grad` slot via [`Tape::read_grad_into`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Gradient of the most recent scalar loss with respect to this tensor,
    /// populated by [`Tape::read_grad_into`]. `None` until a backward pass
    /// has been harvested.
    pub grad: Option<Vec<f64>>,
    /// Leaf id assigned by the most recent [`Tape::place`] call, if any.
    pub tape_id: Option<TensorId>,
}

impl Tensor {
    /// Builds a tensor, validating that the value count matches the shape and
    /// that every value is finite.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self, TensorError> {
        if numel(shape) != values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteValue(i));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            tape_id: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; numel(shape)],
            grad: None,
            tape_id: None,
        }
    }

    /// Tensor filled with a single finite value.
    pub fn full(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        Self::new(shape, vec![value; numel(shape)])
    }

    /// Rank-zero tensor holding one value.
    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(&[], vec![value])
    }

    /// Tensor with entries drawn i.i.d. from `U(-bound, bound)`.
    pub fn uniform<R: rand::Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let values = (0..numel(shape)).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            tape_id: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for in-place optimizer updates. The caller is expected
    /// to keep values finite; the tape re-checks on placement in debug builds.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Value of a rank-zero or single-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.values.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(TensorError::NotScalar(self.values.len()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch(_)));
        let t = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn construction_rejects_non_finite_values() {
        let err = Tensor::new(&[3], vec![0.0, f64::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteValue(1)));
        let err = Tensor::new(&[1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteValue(0)));
    }

    #[test]
    fn empty_shape_is_scalar() {
        let s = Tensor::scalar(4.25).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 4.25);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }
}
