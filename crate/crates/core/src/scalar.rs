use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of every tensor in the crate: `f32` or `f64`.
///
/// The reference path (training, gradient checks, equivalence tests) runs in
/// `f64`; `f32` exists for inference benchmarks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Name used in weight-file headers and logs.
    const NAME: &'static str;

    #[inline]
    fn of(x: f64) -> Self {
        // f64 -> f32 never fails, it rounds or saturates to infinity.
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
