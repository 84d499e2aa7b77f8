use std::fmt::{Debug, Display};
use std::iter::Sum;

use nalgebra::{ClosedAddAssign, ClosedMulAssign, ClosedSubAssign};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the curve containers and pair-testing core are
/// generic over. Implemented for `f32` and `f64`.
///
/// Probabilities, cumulants and everything downstream of them are always
/// carried in `f64`; only the bulk curve data and Gram matrices follow `T`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + nalgebra::Scalar
    + ClosedAddAssign
    + ClosedSubAssign
    + ClosedMulAssign
    + Sum
    + Default
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("every Real converts to f64")
    }

    fn from_usize_lossy(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("usize converts to every Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}
