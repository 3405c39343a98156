//! Seed splitting.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! 64-bit value. Sub-streams (one per sampled column, per simulated frame)
//! take `derive_seed(master, index)`, the SplitMix64 finalizer applied to the
//! master seed mixed with the finalized index. Distinct indices give
//! decorrelated seeds and the mapping never changes between releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sub-stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix(master ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
