//! Scalar abstraction shared by the spectral algebra, the networks and the optimizer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real floating point type usable by the generic parts of the crate.
///
/// Implemented for `f32` and `f64`. The backward scheme, the path simulation and
/// the oracles are fixed to `f64`; everything below them is generic.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }

    /// Machine epsilon as f64, used to scale "exact up to rounding" checks.
    fn eps_f64() -> f64 {
        Self::epsilon().as_f64()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
