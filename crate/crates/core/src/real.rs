//! Scalar abstraction shared by the grid, interpolation and inference code.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical kernels are written against (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only if the value is not representable at all.
    #[inline(always)]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal not representable")
    }

    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Number of significand bits, including the implicit one.
    fn mantissa_digits() -> u32;
}

impl Real for f32 {
    fn mantissa_digits() -> u32 {
        f32::MANTISSA_DIGITS
    }
}

impl Real for f64 {
    fn mantissa_digits() -> u32 {
        f64::MANTISSA_DIGITS
    }
}

/// A point or vector in the plane.
pub type Point2<T> = [T; 2];

#[inline]
pub fn add<T: Real>(a: Point2<T>, b: Point2<T>) -> Point2<T> {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub<T: Real>(a: Point2<T>, b: Point2<T>) -> Point2<T> {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale<T: Real>(a: Point2<T>, s: T) -> Point2<T> {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn dot<T: Real>(a: Point2<T>, b: Point2<T>) -> T {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm<T: Real>(a: Point2<T>) -> T {
    a[0].hypot(a[1])
}

#[inline]
pub fn cast_point<S: Real, T: Real>(p: Point2<S>) -> Point2<T> {
    [T::lit(p[0].to_f64_lossy()), T::lit(p[1].to_f64_lossy())]
}
