//! Seeded random streams.
//!
//! Every random decision in the toolkit draws from a ChaCha8 generator keyed by
//! a user seed and a fixed stream id, so unrelated consumers of the same seed
//! never see correlated sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Family = 1,
    Corpus = 2,
    Init = 3,
    Triplets = 4,
    Shuffle = 5,
    GradientCheck = 6,
    Vocabulary = 7,
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `bytes`, starting from `state`.
pub fn fnv1a_extend(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

pub(crate) fn fnv_offset() -> u64 {
    FNV_OFFSET
}
