//! Deterministic random streams.
//!
//! Every random decision in a run draws from a stream keyed by
//! `(master_seed, purpose, round, client)`. The key is mixed with SplitMix64 so
//! the derivation is stable across platforms and independent of thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Partition = 2,
    Split = 3,
    Init = 4,
    Selection = 5,
    Training = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of words into a single 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Stream for `(master_seed, purpose, round, client)`.
pub fn stream(master_seed: u64, purpose: Purpose, round: u64, client: u64) -> SimRng {
    SimRng::seed_from_u64(mix(&[master_seed, purpose as u64, round, client]))
}

/// Plain seeded stream, for standalone operations that take a user seed.
pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
