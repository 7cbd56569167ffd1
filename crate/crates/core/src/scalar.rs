//! Floating-point abstraction shared by every module.
//!
//! All solvers are written against [`Scalar`] so the same code runs in `f32`
//! or `f64`. Statistics that summarize many samples (means, standard errors,
//! regression slopes) are accumulated in `f64` regardless of `T`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float + FromPrimitive + NumAssign + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Convert an `f64` literal or configuration value into `Self`.
    fn cast(v: f64) -> Self;

    /// Widen to `f64` for accumulation and reporting.
    fn as_f64(self) -> f64;

    fn half() -> Self {
        Self::cast(0.5)
    }

    fn two() -> Self {
        Self::cast(2.0)
    }
}

impl Scalar for f32 {
    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn cast(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `T::cast`.
#[inline]
pub(crate) fn c<T: Scalar>(v: f64) -> T {
    T::cast(v)
}
