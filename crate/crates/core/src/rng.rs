//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit generator; ensembles derive one
//! independent ChaCha stream per trial from a base seed so results do not depend
//! on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Documented default seed used when none is given.
pub const DEFAULT_SEED: u64 = 0x5EED_2016;

pub fn from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` derived from `seed`.
pub fn stream(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Seed of trial `index` in an ensemble started from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, 0x7A1A_0000 + index).next_u64()
}
