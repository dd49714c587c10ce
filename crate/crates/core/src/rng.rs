//! Per-purpose random streams derived from a single user seed.
//!
//! Every consumer of randomness draws from its own stream, keyed by
//! `(seed, purpose, index)`, so e.g. changing the shuffle order never
//! perturbs weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    SynthTrain = 3,
    SynthTest = 4,
    RandomSelect = 5,
    DownstreamInit = 6,
    DownstreamShuffle = 7,
    FpsStart = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(seed);
    let b = splitmix64(a ^ (stream as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    splitmix64(b ^ index.wrapping_mul(0xe703_7ed1_a0b4_28db))
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
