//! Floating-point element types.

use core::fmt::{Debug, Display};
use num_traits::Float;

/// Element type of tensors: `f32` for training runs, `f64` for
/// verification.
pub trait Scalar: Float + Debug + Display + Default + Send + Sync + core::iter::Sum + 'static {
    /// Tag used in checkpoints and configs.
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
