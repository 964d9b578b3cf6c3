//! Scalar abstraction for the numerical kernels.
//!
//! All core math is generic over [`Scalar`]; `f32` and `f64` implement it.
//! Concrete `f64` aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating point scalar usable by every solver in this crate.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Sum + Display + Debug + Send + Sync + 'static
{
    /// Lift an `f64` constant into the scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable")
    }

    /// Machine epsilon.
    fn eps() -> Self;
}

impl Scalar for f32 {
    fn eps() -> Self {
        f32::EPSILON
    }
}

impl Scalar for f64 {
    fn eps() -> Self {
        f64::EPSILON
    }
}
