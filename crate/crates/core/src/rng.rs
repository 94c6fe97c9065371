//! Labeled deterministic random streams.
//!
//! Every random decision in the crate draws from a stream identified by a
//! (master seed, label) pair: the stream seed is the 64-bit FNV-1a hash of
//! the label XORed with the master seed. Distinct labels give independent
//! streams, so dataset generation, weight init, batch shuffling, path
//! sampling, and search never interleave.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the label bytes.
pub fn fnv1a(label: &str) -> u64 {
    let mut hash = FNV_OFFSET;
    for byte in label.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Seed of the stream identified by (master, label).
pub fn stream_seed(master: u64, label: &str) -> u64 {
    fnv1a(label) ^ master
}

/// Deterministic generator for the stream identified by (master, label).
///
/// ChaCha8 is bit-reproducible across platforms, so the same pair yields
/// the same byte stream everywhere.
pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, label))
}
