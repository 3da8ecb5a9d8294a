//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a root seed and a
//! list of tags (phase, step, item index, ...). Work can then be split across threads
//! in any way without changing the numbers each item sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with tags into a single 64-bit sub-seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> RngStream {
    RngStream::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags for the different consumers of randomness.
pub mod tag {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BC: u64 = 3;
    pub const CRITIC: u64 = 4;
    pub const CANDIDATES: u64 = 5;
    pub const CACHE: u64 = 6;
    pub const DISTILL: u64 = 7;
    pub const ROLLOUT: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const BEHAVIOR: u64 = 10;
    pub const PROBE: u64 = 11;
    pub const CEM: u64 = 12;
}
