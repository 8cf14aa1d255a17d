//! Seed derivation. Every random draw in a run comes from a ChaCha stream
//! whose seed is a pure function of the run seed and a purpose tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod stream {
    pub const IMPUTER_INIT: u64 = 1;
    pub const FORECASTER_INIT: u64 = 2;
    pub const TRAIN_SUBSET: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const VALID_SUBSET: u64 = 5;
    pub const EVAL_SUBSET: u64 = 6;
    pub const GAUSSIAN_FILL: u64 = 7;
    pub const REFERENCE_INIT: u64 = 8;
    pub const PRETRAIN_INIT: u64 = 9;
    pub const SYNTH: u64 = 10;
    pub const GRADCHECK: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
