//! Scalar abstraction: every numeric routine in the crate is generic over a
//! floating-point type so the same code runs in f32 for training speed and in
//! f64 for gradient checks and convergence-law tests.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough constant conversion from f64 literals.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    /// Widen to f64 for reporting and serialization.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand used throughout: cast an f64 constant into the working scalar.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64_c(v)
}
