use std::fmt::{Debug, Display};

use num_traits::Float;

/// Element type for tensors. Training defaults to `f32`; every verification
/// suite (gradient checks, oracle comparisons) runs with `f64`. The choice is
/// a run-wide configuration, not a per-tensor property.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Raw little-endian f32 bytes, the checkpoint element encoding.
    fn to_f32_bits(self) -> [u8; 4] {
        (self.as_f64() as f32).to_le_bytes()
    }
    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand literal conversion used all over numeric code.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}
