//! Seed-derived random streams.
//!
//! Every consumer of randomness draws from its own stream, derived from the
//! master seed, a purpose tag and a key (usually the step index). A training
//! run resumed from a checkpoint at step `s` therefore sees exactly the same
//! random numbers as an uninterrupted run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    ParamInit,
    Batch,
    Views,
    KMeans,
    Corpus,
    Probe,
    Queue,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ParamInit => 0x5041_5241,
            Stream::Batch => 0x4241_5443,
            Stream::Views => 0x5649_4557,
            Stream::KMeans => 0x4b4d_4541,
            Stream::Corpus => 0x434f_5250,
            Stream::Probe => 0x5052_4f42,
            Stream::Queue => 0x5155_4555,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, purpose, keys...)`.
pub fn stream(seed: u64, purpose: Stream, keys: &[u64]) -> Rng {
    let mut h = splitmix64(seed ^ purpose.tag());
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    Rng::seed_from_u64(h)
}
