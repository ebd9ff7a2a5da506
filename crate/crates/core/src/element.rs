use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar element type of a tensor.
///
/// Implemented for `f32` (inference default) and `f64` (gradient checks and
/// oracles). Besides arithmetic, the fault injector needs raw bit access and
/// the checksum comparison needs a per-type default tolerance.
pub trait Element: Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static {
    /// Default relative comparison tolerance for checksum verification.
    const DEFAULT_TAU: f64;
    /// Width of the binary representation.
    const BITS: u32;
    const NAME: &'static str;

    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    #[inline]
    fn from_index(i: usize) -> Self {
        Self::lit(i as f64)
    }
}

impl Element for f32 {
    const DEFAULT_TAU: f64 = 1e-4;
    const BITS: u32 = 32;
    const NAME: &'static str = "f32";

    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }
    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Element for f64 {
    const DEFAULT_TAU: f64 = 1e-10;
    const BITS: u32 = 64;
    const NAME: &'static str = "f64";

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
