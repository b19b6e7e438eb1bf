//! Dense row-major tensor value. Immutable once built; gradients and
//! intermediate buffers live on the tape, not here.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::numel;

/// N-dimensional array of scalars in row-major order.
///
/// `requires_grad` marks leaves that should receive gradients when the
/// tensor is placed on a tape; it has no effect on plain value arithmetic.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    /// Build from an owned buffer. The buffer length must match the shape
    /// and every extent must be at least 1.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::invalid(
                "from_vec",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::invalid(
                "from_vec",
                format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data: Arc::new(data), requires_grad: false })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::from_vec(shape, vec![T::zero(); n]).expect("zeros: invalid shape")
    }

    /// Tensor filled with one value.
    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self::from_vec(shape, vec![value; n]).expect("full: invalid shape")
    }

    /// Build by calling `f` on each flat (row-major) index.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(&shape);
        Self::from_vec(shape, (0..n).map(|i| f(i)).collect()).expect("from_fn: invalid shape")
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![], vec![value]).expect("scalar")
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark (or unmark) this tensor as a gradient leaf.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    /// Same buffer under a different shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || numel(&shape) != self.data.len() {
            return Err(TensorError::invalid(
                "reshaped",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self { shape, data: Arc::clone(&self.data), requires_grad: self.requires_grad })
    }

    /// Convert element type (f32 <-> f64) through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.shape.clone(),
            self.data.iter().map(|&v| U::of_f64(v.to_f64_lossy())).collect(),
        )
        .expect("cast preserves element count")
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Equality compares shape and values only; the grad flag is bookkeeping.
impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_length_mismatch() {
        assert!(Tensor::<f64>::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn scalar_shape_is_empty() {
        let t = Tensor::<f32>::scalar(2.5);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn reshape_shares_data_and_checks_count() {
        let t = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64);
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::<f32>::from_fn(vec![4], |i| i as f32 * 0.5);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(back, t);
    }

    #[test]
    fn equality_ignores_grad_flag() {
        let a = Tensor::<f64>::full(vec![2], 1.0);
        let b = a.clone().with_grad(true);
        assert_eq!(a, b);
    }
}
