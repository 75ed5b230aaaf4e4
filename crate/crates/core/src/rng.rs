//! Seeded pseudo-random streams.
//!
//! All randomness comes from ChaCha8 keyed by a single `u64` seed. Distinct
//! consumers use distinct ChaCha stream ids so they never share draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids; one per independent consumer of a seed.
pub mod stream {
    pub const INIT_ROBUST: u64 = 1;
    pub const INIT_NONROBUST: u64 = 2;
    pub const INIT_HEAD: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const ATTACK_START: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const MIXTURE: u64 = 7;
    pub const INVERSION: u64 = 8;
    pub const SUBSET: u64 = 9;
}

pub fn seeded(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Uniform sample in `[-bound, bound)`.
pub fn symmetric(rng: &mut impl Rng, bound: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * bound
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
