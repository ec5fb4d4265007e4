//! Dense row-major tensors.
//!
//! A tensor owns its values and, after a backward pass has run, optionally a
//! same-shape gradient buffer. Tensors never alias: putting one on a
//! [`crate::tape::Tape`] snapshots the data, so a tensor that stays off the
//! tape is immutable for the duration of a step and safe to share across
//! threads for read-only inference.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> TensorBase<S> {
    pub fn new(data: Vec<S>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "tensor",
                shape,
                reason: format!("{} values provided", data.len()),
            });
        }
        Ok(TensorBase { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        TensorBase {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        TensorBase {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    /// Row-major matrix from nested slices, mostly for tests.
    pub fn from_rows(rows: &[&[S]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        TensorBase { shape: vec![r, c], data, grad: None }
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

    /// Gradient buffer, if a backward pass has deposited one.
    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<S>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient shape mismatch");
        }
        self.grad = grad;
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Gradient as a slice, treating "never touched by backward" as zero.
    pub fn grad_or_zeros(&self) -> std::borrow::Cow<'_, [S]> {
        match &self.grad {
            Some(g) => std::borrow::Cow::Borrowed(g),
            None => std::borrow::Cow::Owned(vec![S::zero(); self.data.len()]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S: Scalar> TensorBase<S> {
    /// 2-D accessor for tests and kernels that want clarity over speed.
    pub fn at(&self, row: usize, col: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }
}
