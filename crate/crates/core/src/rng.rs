//! Seeded, splittable random streams.
//!
//! Every source of randomness in the crate is a [`Stream`] passed in
//! explicitly; there is no global RNG. Independent substreams are derived
//! from a master seed plus an index (ChaCha stream selection), so episodes
//! are reproducible individually and order-independent.

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use alloc::vec::Vec;

/// Deterministic random stream used throughout the crate.
pub type Stream = ChaCha12Rng;

/// Stream seeded directly from a 64-bit seed (substream 0).
pub fn stream_from_seed(seed: u64) -> Stream {
    substream(seed, 0)
}

/// Independent substream `index` of the master seed.
pub fn substream(seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One draw from N(0, sigma^2).
pub fn normal(rng: &mut Stream, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Uniform draw from [-bound, bound].
pub fn uniform_symmetric(rng: &mut Stream, bound: f64) -> f64 {
    rng.random_range(-bound..=bound)
}

/// `amount` distinct indices from `0..len`, in sampling order.
pub fn sample_indices(rng: &mut Stream, len: usize, amount: usize) -> Vec<usize> {
    index_sample(rng, len, amount).into_vec()
}
