//! Seed expansion.
//!
//! A single user seed is expanded into independent streams with SplitMix64:
//! the generator is seeded with the raw seed and its `k`-th output (`k`
//! starting at 1) becomes the seed of stream `k`. Each stream then drives a
//! ChaCha8 generator.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Rotations = 3,
    Data = 4,
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(seed);
    let mut out = 0;
    for _ in 0..stream as usize {
        out = sm.next_u64();
    }
    out
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream))
}

/// Generator for one epoch of a stream, so resumed runs shuffle identically.
pub fn epoch_rng(seed: u64, stream: Stream, epoch: usize) -> ChaCha8Rng {
    let mut sm = SplitMix64::seed_from_u64(stream_seed(seed, stream) ^ epoch as u64);
    ChaCha8Rng::seed_from_u64(sm.next_u64())
}
