//! Seed derivation shared by every randomized stage.
//!
//! Every per-item generator is seeded with `global_seed ^ item_index`, so work can
//! be split across threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type FqaRng = ChaCha8Rng;

pub fn derive_seed(global_seed: u64, index: u64) -> u64 {
    global_seed ^ index
}

pub fn rng_for(global_seed: u64, index: u64) -> FqaRng {
    FqaRng::seed_from_u64(derive_seed(global_seed, index))
}

pub fn rng_from_seed(seed: u64) -> FqaRng {
    FqaRng::seed_from_u64(seed)
}
