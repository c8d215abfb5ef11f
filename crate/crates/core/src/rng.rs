//! Counter-based seed derivation.
//!
//! Every stochastic stage (holdout, balancing, splits, augmentation, dropout,
//! epoch shuffles) derives its generator from a master seed plus a few
//! stable counters, so results never depend on iteration order or thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of words into one 64-bit seed.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Stable 64-bit FNV-1a hash of a byte string.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seeded generator for a `(seed, stream, counters...)` tuple.
pub fn stream_rng(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}

/// Domain tags so unrelated stages never share a stream.
pub mod domain {
    pub const HOLDOUT: u64 = 1;
    pub const BALANCE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const DROPOUT: u64 = 7;
    pub const SYNTH: u64 = 8;
}
