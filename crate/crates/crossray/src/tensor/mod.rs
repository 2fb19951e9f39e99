//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is the universal numeric carrier: a shape plus a flat
//! row-major buffer of `f32` or `f64`. Scalars have shape `[]`. Recording
//! onto a [`Tape`] happens through [`Var`] handles; every public operation
//! validates shapes and rejects non-finite results.

mod gradcheck;
mod ops;
mod params;
mod scalar;
mod tape;

pub use gradcheck::{grad_check, op_kind_checks, GradCheckReport};
pub use params::{AdamParams, CheckpointData, CheckpointError, ParamSet};
pub(crate) use params::fnv1a;
pub use scalar::Scalar;
pub use tape::{Tape, Var};

use thiserror::Error;

/// Errors raised by tensor construction, ops, and the tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid { op, msg: msg.into() }
    }

    pub(crate) fn shapes(op: &'static str, shapes: &[&[usize]]) -> Self {
        TensorError::ShapeMismatch {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}

/// Dense n-dimensional array, row-major, shape `[]` = scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::invalid(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel_of(shape), data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![S::ZERO; numel_of(shape)] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel_of(shape)] }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(shape, data.iter().map(|&x| S::from_f64(x)).collect())
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

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a scalar-shaped (numel 1) tensor.
    pub fn item(&self) -> S {
        assert!(self.data.len() == 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if numel_of(shape) != self.data.len() {
            return Err(TensorError::shapes("reshape", &[&self.shape, shape]));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        // Non-short-circuiting fold inside each chunk so the check vectorizes;
        // chunk granularity still bails out early on poisoned tensors.
        self.data
            .chunks(4096)
            .all(|c| c.iter().fold(true, |ok, x| ok & x.is_finite()))
    }

    /// Largest |a−b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Convert between element types, widening through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }
}
