//! Scalar abstraction shared by every solver in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the grids, solvers and wire codecs: `f32` or `f64`.
///
/// On top of nalgebra's `RealField` the trait fixes a little-endian byte encoding,
/// so that every payload exchanged between ranks has a defined layout.
pub trait Real: RealField + Copy + Default + FromPrimitive + ToPrimitive {
    /// Encoded size in bytes.
    const BYTES: usize;

    fn put_le(self, out: &mut Vec<u8>);

    /// Decodes from the first `BYTES` bytes of `bytes`.
    fn get_le(bytes: &[u8]) -> Self;

    /// Converts a literal. Panics only if the literal is not representable at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal out of range for scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }
}

impl Real for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    #[inline]
    fn get_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    #[inline]
    fn get_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}
