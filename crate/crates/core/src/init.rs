//! Seeded parameter initializers.

use morphwin_tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SeededRng = Xoshiro256PlusPlus;

/// Generator for `seed`, offset by a stream tag so that independent
/// consumers of one user seed do not share draws.
pub fn rng(seed: u64, stream: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

/// He-style normal for a kernel feeding a leaky-relu with `slope`.
pub fn fan_in_normal<T: Real>(shape: &[usize], fan_in: usize, slope: f64, rng: &mut SeededRng) -> Tensor<T> {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}
