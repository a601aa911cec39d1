//! Seed derivation for reproducible, thread-count-independent randomness.
//!
//! Every unit of work (a simulation replicate, a bootstrap resample) owns a
//! ChaCha stream derived from the master seed and the unit's index, so the
//! draws are identical whether units run sequentially or in parallel.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; a fixed bijective scramble of a 64-bit word.
pub fn mix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a stream tag. Used to give
/// nested layers (replicate -> bootstrap) independent stream families.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    mix(master ^ mix(tag))
}

/// RNG for work unit `index` under `master`: ChaCha8 seeded from the master
/// and placed on stream `index`.
pub fn stream_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}
