//! Deterministic seed derivation so every random stream in a run is a pure
//! function of the run seed and the position it is used at.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `tags` into `base`.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

/// Stream identifiers passed as the first tag.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const VALIDATION_MASK: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SYNTHETIC: u64 = 7;
    pub const EVAL_MASK: u64 = 8;
}
