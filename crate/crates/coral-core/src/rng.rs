//! Seeded, splittable RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from
//! `(seed, stream, index)`, so any step, task, or evaluation can be
//! regenerated in isolation and runs are reproducible bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags; values are arbitrary but frozen.
pub const STREAM_INIT: u64 = 0x01;
pub const STREAM_TASK: u64 = 0x02;
pub const STREAM_STEP: u64 = 0x03;
pub const STREAM_EVAL: u64 = 0x04;
pub const STREAM_SAMPLE: u64 = 0x05;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream)) ^ index)
}

/// Derives an independent ChaCha stream for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
