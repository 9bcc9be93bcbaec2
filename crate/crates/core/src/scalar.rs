//! Scalar abstraction over the two supported precisions.
//!
//! Training and gradient checks run at 64-bit; inference and benchmarks
//! default to 32-bit. Everything downstream is generic over [`Scalar`].

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Element type of all tensors: `f32` or `f64`.
pub trait Scalar: Float + NumAssign + Debug + Display + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Little-endian bytes of the value narrowed to 32-bit, the on-disk
    /// representation shared by checkpoints and the weight cache.
    fn to_f32_le_bytes(self) -> [u8; 4] {
        (self.as_f64() as f32).to_le_bytes()
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
