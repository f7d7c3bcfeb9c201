//! Seeded random streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is a
//! mix of a user seed and a small tuple of counters (block, epoch, sample,
//! substep, ...). Results therefore do not depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::Mat;

pub type FlowRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of counters into a new 64-bit seed.
pub fn derive_seed(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(seed: u64, counters: &[u64]) -> FlowRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, counters))
}

pub fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `n × d` matrix of i.i.d. standard normal draws.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(n, d);
    m.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = standard_normal(rng));
    m
}
