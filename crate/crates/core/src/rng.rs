//! Seed derivation shared by every stochastic component.
//!
//! All randomness flows from 64-bit seeds mixed with SplitMix64, so a draw is
//! a pure function of its coordinates (seed, sample id, round, stream) rather
//! than of the order in which samples are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of coordinates into one seed.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags keep independent uses of the same coordinates apart.
pub mod stream {
    pub const WEAK_LABELED: u64 = 0x0057_4541_4b4c;
    pub const WEAK_UNLABELED: u64 = 0x0057_4541_4b55;
    pub const STRONG: u64 = 0x5354_524f_4e47;
    pub const LABELED_ORDER: u64 = 0x4c4f_5244;
    pub const UNLABELED_ORDER: u64 = 0x554f_5244;
    pub const K_DRAW: u64 = 0x4b44_5257;
    pub const SPLIT: u64 = 0x5350_4c54;
}
