//! Floating-point scalar abstraction.
//!
//! Verification code runs in `f64`; training defaults to `f32`. Everything
//! numerical in the crate is generic over [`Real`].

use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Size of one encoded value in bytes.
    const BYTES: usize;
    /// Short name used in file headers and summaries ("f32" / "f64").
    const NAME: &'static str;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes one value from exactly `BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw bit pattern widened to 64 bits, used for hashing.
    fn bits(self) -> u64;

    // `Float::exp` and friends switch to the platform math library when
    // any crate in the build enables `num-traits/std`, so the same run
    // could train differently depending on what else was compiled. These
    // always go through libm.
    fn exp_m(self) -> Self;
    fn ln_m(self) -> Self;
    fn powi_m(self, n: i32) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    fn exp_m(self) -> Self {
        libm::expf(self)
    }
    fn ln_m(self) -> Self {
        libm::logf(self)
    }
    fn powi_m(self, n: i32) -> Self {
        libm::powf(self, n as f32)
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
    fn exp_m(self) -> Self {
        libm::exp(self)
    }
    fn ln_m(self) -> Self {
        libm::log(self)
    }
    fn powi_m(self, n: i32) -> Self {
        libm::pow(self, n as f64)
    }
}
