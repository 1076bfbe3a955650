//! Scalar abstraction over `f32` (training mode) and `f64` (checking mode).

use num_traits::{Float, FromPrimitive};

/// Element type for tensors and DSP kernels. Training runs in `f32`,
/// gradient checking and reference paths in `f64`.
pub trait Real:
    Float + FromPrimitive + rustfft::FftNum + std::iter::Sum + Default + std::fmt::Display
{
    fn to_f64_(self) -> f64;
}

impl Real for f32 {
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Shorthand conversion from an `f64` literal into the generic scalar.
#[inline]
pub fn r<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 conversion")
}
