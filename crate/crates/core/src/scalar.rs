//! Floating-point scalar abstraction.
//!
//! All analog quantities (conductances, currents, ADC ranges) are generic
//! over [`Real`], so the whole simulator can run in `f32` or `f64`.
//! Integer quantities (weight codes, activation codes, ADC codes) are
//! always concrete integer types.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar type for analog quantities: `f32` or `f64`.
pub trait Real:
    Float + NumAssign + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`, rounds for `f32`).
    fn from_f(v: f64) -> Self;

    /// Widening conversion to `f64` (exact for both).
    fn to_f(self) -> f64;

    /// One standard-normal draw from `rng`.
    fn standard_normal<G: Rng + ?Sized>(rng: &mut G) -> Self;
}

impl Real for f32 {
    #[inline]
    fn from_f(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f(self) -> f64 {
        self as f64
    }

    #[inline]
    fn standard_normal<G: Rng + ?Sized>(rng: &mut G) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f(self) -> f64 {
        self
    }

    #[inline]
    fn standard_normal<G: Rng + ?Sized>(rng: &mut G) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Round half away from zero. This is the single rounding rule used for all
/// quantization steps in the simulator (`f64::round` / `f32::round` have
/// exactly this behavior).
#[inline]
pub fn round_half_away<R: Real>(v: R) -> R {
    v.round()
}
