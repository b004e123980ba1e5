//! Seeding scheme shared by the generators.
//!
//! Every random quantity comes from ChaCha8 (8-round ChaCha, 64-bit seed
//! expanded by `SeedableRng::seed_from_u64`) on an explicit stream id, so a
//! sample depends only on `(seed, index)` and can be generated in any order
//! or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Streams at or above this id are reserved for dataset-level parameters.
pub const PARAM_STREAM_BASE: u64 = 1 << 62;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream for purpose `slot` of sample `index`, with `slots` purposes per sample.
pub fn sample_stream(seed: u64, index: u64, slots: u64, slot: u64) -> ChaCha8Rng {
    debug_assert!(slot < slots);
    stream(seed, index * slots + slot)
}
