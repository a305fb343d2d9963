use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point scalar the numerical core is generic over.
///
/// Implemented for `f32` and `f64`. Everything that reads or writes files,
/// and every eigenvalue check, goes through `f64`.
pub trait Real: NdFloat + FromPrimitive + Default + Sum + 'static {
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_exact(n: usize) -> Self {
        Self::from_usize(n).expect("integer not representable in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}
