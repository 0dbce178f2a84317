//! Seed plumbing.
//!
//! Every stochastic choice in the crate (weight init, adapter init, shuffle
//! order) draws from a ChaCha stream keyed by a seed derived here, so a run
//! is a pure function of its top-level seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// Derive a child seed from a parent seed and a stream tag (splitmix64 mix).
/// Adjacent tags yield statistically independent child streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` Gaussian samples with the given std. Sampling happens in f64 and is
/// cast down, so f32 and f64 instantiations see the same underlying draws.
pub fn gaussian<S: Scalar>(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64(z * std)
        })
        .collect()
}
