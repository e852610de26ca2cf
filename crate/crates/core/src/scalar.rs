//! Generic floating-point scalar for the numeric core.

use nalgebra as na;
use num_traits as nt;

/// Scalar trait bound for all vehicle/optimizer math: f32 or f64.
pub trait Real: Copy + na::RealField + nt::FromPrimitive + nt::ToPrimitive + Default {
    /// Shorthand for lossy conversion from f64 literals in generic code.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
