//! Seed derivation and RNG construction.
//!
//! Every random decision in the crate flows from a user-supplied base seed
//! through [`derive_seed`], so independent pipeline stages (LDA fit, centroid
//! choice, treatment draws, noise, parameter init, batching) get decoupled
//! streams while staying reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the simulation pipeline and trainer.
pub mod stream {
    pub const LDA: u64 = 1;
    pub const CENTROIDS: u64 = 2;
    pub const TREATMENTS: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const PARAM_INIT: u64 = 5;
    pub const BATCHES: u64 = 6;
    pub const VAL_SPLIT: u64 = 7;
    pub const SBM: u64 = 8;
    pub const COVARIATES: u64 = 9;
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for a (base seed, stream tag) pair.
pub fn rng_for(base: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

/// Deterministic RNG for a (base seed, stream tag, index) triple, used where
/// a per-epoch or per-item stream is needed.
pub fn rng_for_indexed(base: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(base, tag), index))
}
