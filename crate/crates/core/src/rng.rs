//! Seed derivation for independent, reproducible random streams.
//!
//! Every stream (initialization, shuffling, noise, client selection, per-client
//! work) is keyed by the run seed plus a tag and a small tuple of indices, so a
//! stream never depends on how many draws another stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags. Values are part of the reproducibility contract; do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
    Split = 4,
    Partition = 5,
    Select = 6,
    ClientShuffle = 7,
    ClientNoise = 8,
    Synth = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed, a stream tag and indices into a 64-bit stream seed.
pub fn derive_seed(seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, indices: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, indices))
}
