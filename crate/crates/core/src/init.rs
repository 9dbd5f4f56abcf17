//! Seeded parameter initialization. All randomness flows through ChaCha8.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::tensor::Tensor;

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[-bound, bound)`.
pub fn uniform<R: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<R> {
    Tensor::from_fn(shape, |_| {
        R::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound)
    })
}

/// Standard normal samples via Box–Muller, using `libm` so results do not
/// depend on the platform's math library.
pub fn normal<R: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<R> {
    Tensor::from_fn(shape, |_| R::from_f64(std * standard_normal(rng)))
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Fan-in scaled uniform bound `1/√fan_in`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / libm::sqrt(fan_in.max(1) as f64)
}
