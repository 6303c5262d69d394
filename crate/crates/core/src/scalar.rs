use nalgebra::{DMatrix, RealField};
use num_traits::ToPrimitive;

/// Floating point scalar the numerical core is written against: `f32` or `f64`.
pub trait Real: RealField + Copy + ToPrimitive {
    /// Converts an `f64` constant into this scalar type.
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn frobenius_sq<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &v| acc + v * v)
}
