use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type for spectra, endmembers and proportions.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Smallest tolerance worth asking for at this precision.
    const TOL_FLOOR: f64;

    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn from_f32_bits(v: f32) -> Self;

    fn to_f32_lossy(self) -> f32;

    /// `requested`, raised to what this precision can actually resolve.
    fn tol(requested: f64) -> Self {
        Self::lit(requested.max(Self::TOL_FLOOR))
    }
}

impl Scalar for f64 {
    const TOL_FLOOR: f64 = 1e-14;

    fn from_f32_bits(v: f32) -> Self {
        v as f64
    }

    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

impl Scalar for f32 {
    const TOL_FLOOR: f64 = 2e-6;

    fn from_f32_bits(v: f32) -> Self {
        v
    }

    fn to_f32_lossy(self) -> f32 {
        self
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn sq_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Angle between two spectra in degrees; scale invariant.
pub fn spectral_angle_deg<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = sq_norm(a).sqrt();
    let nb = sq_norm(b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return 90.0;
    }
    let c = (dot(a, b) / (na * nb)).as_f64().clamp(-1.0, 1.0);
    c.acos().to_degrees()
}
