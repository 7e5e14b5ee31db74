//! Seed derivation.
//!
//! Every stochastic component receives its own stream seed derived from a
//! single master seed: `derive(master, stream) = splitmix64(master ^ splitmix64(stream))`.
//! Stream identifiers are stable string labels hashed with FNV-1a, so adding a
//! new consumer never perturbs the seeds of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for the named stream under `master`.
pub fn derive(master: u64, stream: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(stream.as_bytes())))
}

/// Seed for the `index`-th replicate of a named stream.
pub fn derive_indexed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(derive(master, stream) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
