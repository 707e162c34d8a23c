//! Scalar abstraction over the floating-point element type.
//!
//! Every numeric component in this crate is generic over [`Scalar`] so the
//! same code can run in `f32` (fast training/inference) and `f64`
//! (finite-difference gradient verification). Concrete aliases for the
//! common instantiations live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type usable by tensors, layers and losses.
///
/// The byte-level accessors exist so checkpoints can be written and read
/// bit-exactly regardless of the instantiation.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum<Self>
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Stable dtype tag stored in checkpoint manifests.
    const DTYPE: &'static str;
    /// Serialized size in bytes.
    const BYTES: usize;

    /// Converts from `f64`, the type used for configuration constants.
    fn of(v: f64) -> Self;
    /// Widens to `f64` for reporting and cross-precision comparisons.
    fn as_f64(self) -> f64;
    /// Appends the little-endian byte representation to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from exactly [`Scalar::BYTES`] little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_exact() {
        let vals = [0.0f64, -1.5, 3.25e-7, f64::MAX / 2.0];
        for &v in &vals {
            let mut buf = Vec::new();
            v.write_le(&mut buf);
            assert_eq!(f64::read_le(&buf), v);

            let vf = v as f32;
            let mut buf = Vec::new();
            vf.write_le(&mut buf);
            assert_eq!(f32::read_le(&buf), vf);
        }
    }

    #[test]
    fn dtype_tags_differ() {
        assert_eq!(<f32 as Scalar>::DTYPE, "f32");
        assert_eq!(<f64 as Scalar>::DTYPE, "f64");
        assert_ne!(<f32 as Scalar>::BYTES, <f64 as Scalar>::BYTES);
    }
}
