//! Scalar abstraction for the tensor engine.
//!
//! All core math is generic over [`Scalar`] so the same kernels run in f32
//! or f64. The crate-root aliases pin everything user-facing to f64, where
//! the gradient-check and oracle tolerances are unambiguous.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from f64 for constants like epsilons.
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("constant conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
