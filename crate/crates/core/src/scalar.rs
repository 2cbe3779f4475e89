//! Floating-point scalar abstraction shared by the linear algebra and the
//! mechanisms. Privacy accounting itself is always carried out in `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rand_distr::{Distribution, StandardNormal};

/// f32 or f64.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless for f64, rounding for f32.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Relative slack used when checking norms and symmetry; never tighter
    /// than a few hundred ulps of the type.
    fn slack(nominal: f64) -> Self {
        Self::of(nominal).max(Self::epsilon() * Self::of(256.0))
    }

    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    }
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng)
    }
}
