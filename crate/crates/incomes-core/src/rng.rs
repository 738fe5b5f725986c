//! Seeded RNG streams.
//!
//! Every run takes one `u64` seed. Components derive their own independent
//! stream by hashing the seed with a short label, so adding a new consumer
//! never shifts the draws of an existing one. ChaCha8 keeps the streams
//! identical across platforms and build settings.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Derive the sub-seed for `label` from a run seed.
///
/// FNV-1a over the label bytes folded into the seed; stable by construction
/// (no dependence on `std` hashers, which are randomized).
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for `label`'s stream under `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, label))
}
