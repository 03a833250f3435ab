//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Real number type a [`crate::Tensor`] can hold.
///
/// Implemented for `f32` and `f64`. Everything that has to leave the
/// process (checkpoints, metric reports, JSONL) goes through `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_f64_lossy(n as f64)
    }
}

macro_rules! scalar_impl {
    ($($t:ty),+) => {
        $(
            impl Scalar for $t {
                #[inline]
                fn from_f64_lossy(x: f64) -> Self {
                    x as $t
                }
                #[inline]
                fn to_f64_lossy(self) -> f64 {
                    self as f64
                }
            }
        )+
    };
}

scalar_impl!(f32, f64);
