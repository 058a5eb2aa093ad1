//! Scalar abstraction shared by every numerical routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumCast, ToPrimitive};

/// Floating point type the engines are generic over.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumCast + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Infallible for the supported types.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 literal representable")
    }

    /// Converts an integer count.
    #[inline]
    fn of(k: usize) -> Self {
        <Self as NumCast>::from(k).expect("count representable")
    }

    /// Converts a signed integer.
    #[inline]
    fn of_i(k: i64) -> Self {
        <Self as NumCast>::from(k).expect("integer representable")
    }

    /// Lossy conversion to `f64`, used at I/O boundaries.
    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Comparison tolerance scaled to the precision of the type.
    #[inline]
    fn tol() -> Self {
        Self::epsilon().sqrt() * Self::lit(1e-4)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Standard normal distribution function.
pub fn norm_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5 * libm::erfc(-x.f64() / std::f64::consts::SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lit_round_trips() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.25), 0.25f32);
        assert_eq!(f64::of(7), 7.0);
        assert_eq!(f64::of_i(-3), -3.0);
    }

    #[test]
    fn norm_cdf_reference_points() {
        assert!((norm_cdf(0.0f64) - 0.5).abs() < 1e-15);
        assert!((norm_cdf(1.959963984540054f64) - 0.975).abs() < 1e-12);
        assert!((norm_cdf(-1.0f64) - 0.15865525393145707).abs() < 1e-14);
    }
}
