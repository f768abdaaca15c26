use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar the whole library is generic over.
///
/// Everything numeric (matrices, operators, estimators, the LP solver) works
/// for any implementor; `f64` is the intended default and what the tolerance
/// constants are calibrated for.
pub trait Scalar: Float + NumAssign + Sum + Debug + Display + Send + Sync + 'static {
    /// Tolerance used when validating that probability rows sum to one.
    const STOCHASTIC_TOL: Self;
    /// Below this mass a discounted visitation entry counts as zero, which
    /// decides where TD weights are pinned to zero.
    const VISITATION_TOL: Self;

    fn from_f64(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Draw from U[0, 1).
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draw from N(0, 1).
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f64 {
    const STOCHASTIC_TOL: Self = 1e-12;
    const VISITATION_TOL: Self = 1e-14;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f32 {
    const STOCHASTIC_TOL: Self = 1e-5;
    const VISITATION_TOL: Self = 1e-7;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }

    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
