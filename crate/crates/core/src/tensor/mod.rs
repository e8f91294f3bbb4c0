//! Dense tensors and the reverse-mode autodiff tape.
//!
//! Everything is generic over [`Scalar`] so the same operation definitions run
//! in `f32` for training and inference and in `f64` for finite-difference
//! gradient verification.

mod graph;
pub mod gradcheck;

pub use graph::{Graph, TensorId};

use std::fmt::{Debug, Display};

use crate::error::{Error, Result};

/// Floating-point element type for tensors.
///
/// `f32` is the training/inference type; `f64` is used by the gradient-check
/// suite. The trait only adds the few conversions and special functions the
/// kernels need on top of [`num_traits::Float`].
pub trait Scalar:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// An n-dimensional array in row-major (last axis fastest) order.
///
/// `grad` is populated by [`Graph::backward`] for nodes that require
/// gradients; it always has the same length as `data` when present.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of elements per leading-axis slice, i.e. the product of all
    /// trailing extents. Channel-major kernels treat tensors as `[C, rest]`.
    pub fn rest(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }
}

/// Shared helper: product of extents with overflow detection.
pub(crate) fn checked_numel(extents: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &e in extents {
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::DimOverflow(format!("shape {:?} overflows usize", extents)))?;
    }
    Ok(n)
}
