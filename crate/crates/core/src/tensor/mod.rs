//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major array. Cloning is cheap: the
//! element buffer is shared. Differentiation happens on a [`Graph`], which
//! records every operation applied to its [`Var`] handles and replays the
//! record in reverse on [`Graph::backward`].

mod gemm;
mod graph;
pub mod gradcheck;
pub mod io;
pub mod ops;

use std::fmt;
use std::sync::Arc;

use crate::{Error, Real, Result};

pub use gemm::gemm;
pub use graph::{BackwardFn, Graph, Var};
pub use ops::{BinaryOp, ReduceOp, UnaryOp};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<Real>) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Constructor for kernels that have already validated the extents.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: Real) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let n = shape.iter().product();
        Ok(Self::from_parts(shape, vec![value; n]))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: Real) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// Builds a tensor from a function of the flat row-major index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> Real) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let n = shape.iter().product();
        Ok(Self::from_parts(shape, (0..n).map(f).collect()))
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn to_vec(&self) -> Vec<Real> {
        self.data.as_ref().clone()
    }

    /// Consumes the tensor, avoiding a copy when the buffer is not shared.
    pub fn into_vec(self) -> Vec<Real> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<Real> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "item() needs exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> Real {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Same buffer, new shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_all(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `max |a - b| / max(max |b|, tiny)`; the norm-wise relative
    /// difference used by equivalence checks.
    pub fn max_rel_diff(&self, other: &Tensor) -> Result<Real> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_rel_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let diff = self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m: Real, (a, b)| m.max((a - b).abs()));
        Ok(diff / other.max_abs().max(Real::MIN_POSITIVE))
    }

    /// Identity of the shared buffer; used by [`Graph::param`] to register
    /// each parameter once.
    pub(crate) fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    /// Bitwise equality of shape and elements.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head = &self.data[..self.numel().min(SHOWN)];
        write!(f, " {head:?}")?;
        if self.numel() > SHOWN {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_element_count() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn reshape_shares_buffer() {
        let t = Tensor::new([2, 3], (0..6).map(|i| i as Real).collect()).unwrap();
        let r = t.reshape([3, 2]).unwrap();
        assert_eq!(r.buffer_id(), t.buffer_id());
        assert_eq!(r.at(&[2, 1]), 5.0);
        assert!(t.reshape([4]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn eye_and_item() {
        let e = Tensor::eye(3).unwrap();
        assert_eq!(e.sum_all(), 3.0);
        assert_eq!(e.at(&[1, 1]), 1.0);
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(e.item().is_err());
    }
}
