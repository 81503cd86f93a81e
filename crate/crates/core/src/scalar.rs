//! Scalar abstraction for the numeric core.
//!
//! All dense math in this crate is written against [`Scalar`] so the same
//! routines run in `f32` or `f64`. The pipeline defaults (and every stated
//! tolerance) assume `f64`; see the aliases at the crate root.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by every solver in this crate.
pub trait Scalar: nalgebra::RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal (tolerances, physical constants) into `Self`.
    #[inline]
    fn cast(value: f64) -> Self {
        Self::from_f64(value).expect("literal is not representable in this scalar type")
    }

    /// Widens to `f64` for reporting and serialization.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar is not convertible to f64")
    }
}

impl<T> Scalar for T where T: nalgebra::RealField + Copy + FromPrimitive + ToPrimitive {}
