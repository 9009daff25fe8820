//! Floating-point abstraction for the numeric kernels.
//!
//! Everything that computes (IoU, losses, decoding, AP) is generic over
//! [`Scalar`] so the same code runs at `f32` or `f64`. Configuration structs
//! keep plain `f64` fields and cast at the boundary; files store `f64` (JSON)
//! or `f32` (dense planes) regardless of the in-memory instantiation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used to bring config values into kernels.
    fn cast(v: f64) -> Self;

    /// Widening (or identity) conversion back to `f64` for reports.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn cast(v: f64) -> f32 {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn cast(v: f64) -> f64 {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<S: Scalar>(xs: &[f64]) -> f64 {
        xs.iter().map(|&v| S::cast(v)).sum::<S>().to_f64()
    }

    #[test]
    fn f32_and_f64_agree_on_small_sums() {
        let xs = [0.25, 0.5, 1.0, 2.0];
        assert_eq!(sum_generic::<f32>(&xs), sum_generic::<f64>(&xs));
    }
}
