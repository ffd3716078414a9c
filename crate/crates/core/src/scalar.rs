//! Floating-point abstraction so the numeric paths work at f32 or f64.

use ndarray::NdFloat;
use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar bound for every generic numeric routine in this crate.
///
/// Implemented for `f32` and `f64`. The bound set mirrors what the tensor
/// ops, optimizers, and statistics actually use; nothing here is exotic, so
/// downstream code can stay on stable Rust.
pub trait Float:
    NdFloat
    + SampleUniform
    + Default
    + std::iter::Sum
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// One draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Float for f32 {
    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Float for f64 {
    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
