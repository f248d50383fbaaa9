//! Minimal reverse-mode tensor core: flat row-major buffers, a Wengert tape
//! of recorded ops, and a central-difference checker for every primitive.
//!
//! Correctness is defined at f64 (all property tests and gradient checks run
//! there); training instantiates the same code at f32 for speed.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Padding, Tape, ValueId};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type for all tensors: f64 in verification builds, f32 in training.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// N-dimensional value array with an optional same-shape gradient slot.
/// Row-major storage; `product(dims) == values.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub dims: Vec<usize>,
    pub values: Vec<S>,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            values: vec![S::zero(); n],
            grad: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            dims: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn from_vec(dims: &[usize], values: Vec<S>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::invalid(format!(
                "tensor dims {:?} need {} values, got {}",
                dims,
                n,
                values.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            values: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    /// Truncated-normal init (std given, cut at two sigma), the default for
    /// conv kernels and projection matrices.
    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(dims, |_| S::from_f64(rng.truncated_normal(std)))
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Lossless-where-possible precision change (f32 -> f64 is exact).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            values: self.values.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_respects_truncation() {
        let mut rng = Rng::new(5);
        let t = Tensor::<f64>::randn(&[100], 0.1, &mut rng);
        assert!(t.values.iter().all(|v| v.abs() <= 0.2));
    }
}
