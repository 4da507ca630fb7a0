//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a small
//! tuple of integers (stream tag, generation, index ...). Streams never share
//! state, so results do not depend on scheduling or worker count, and a run
//! can be resumed from a checkpoint without saving generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every stream.
pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `seed`. Order sensitive.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed of individual `id` in `generation`.
pub fn individual_seed(master_seed: u64, id: u64, generation: u64) -> u64 {
    mix_seed(master_seed, &[tags::INDIVIDUAL, id, generation])
}

pub fn stream(seed: u64, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(mix_seed(seed, parts))
}

/// Stream tags.
pub mod tags {
    pub const INDIVIDUAL: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const BACKOFF: u64 = 5;
    pub const OFFSPRING: u64 = 6;
    pub const SURVIVORS: u64 = 7;
    pub const PERTURB: u64 = 8;
}
