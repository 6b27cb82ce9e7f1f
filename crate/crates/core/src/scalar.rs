//! Scalar abstraction so the math core runs at f32 or f64.
//!
//! Everything numeric in the crate is generic over [`Scalar`]; concrete
//! aliases for the two widths live at the crate root. f64 is the default
//! lane (checkpoints store 64-bit blocks); f32 is useful when training
//! throughput matters more than the last bits of precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use rand::Rng;

pub trait Scalar:
    Float
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Width tag recorded in checkpoint manifests.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// One standard-normal draw. Sampling happens in f64 and is narrowed,
    /// so a given rng stream yields the same values in both lanes.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // Box-Muller, one draw per sample to keep the stream layout simple.
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        Self::from_f64(z)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
