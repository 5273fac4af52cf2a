//! Seeded random streams.
//!
//! Every stochastic component draws from [`SplitMix64`], a 64-bit
//! counter-based generator whose output depends only on the seed and the
//! number of draws. Independent streams (one per episode, per run, per
//! purpose) are derived from a root seed with [`stream_seed`], so parallel
//! work reproduces regardless of scheduling.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Finalizer of SplitMix64, used as a 64-bit mixing function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `index`-th child stream of `root`.
pub fn stream_seed(root: u64, index: u64) -> u64 {
    mix64(root ^ mix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

pub fn normal(rng: &mut SplitMix64) -> f64 {
    rng.sample(StandardNormal)
}

/// Normal(0, std) truncated to two standard deviations by rejection.
pub fn truncated_normal(rng: &mut SplitMix64, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
