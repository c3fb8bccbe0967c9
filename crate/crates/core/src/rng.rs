//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`seeded`] so that results are
//! a pure function of the seeds the caller supplies. Independent streams (one
//! per rollout, one per sweep sample) are derived with [`stream_seed`], which
//! makes parallel and serial evaluation produce identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-stream `index` of `master`.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Seed for a two-level sub-stream, e.g. (episode, rollout).
pub fn stream_seed2(master: u64, a: u64, b: u64) -> u64 {
    stream_seed(stream_seed(master, a), b)
}
