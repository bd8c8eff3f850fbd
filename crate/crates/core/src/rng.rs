//! Named, reproducible random streams.
//!
//! All randomness in an experiment flows from a single root seed. Sub-streams
//! are derived from the root by a stable hash of a label (and optional index),
//! so adding a consumer never perturbs the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Mix of splitmix64, used to spread the hashed label across the seed space.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a named sub-stream from a root seed.
pub fn substream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(root ^ fnv1a(label.as_bytes())))
}

/// Derive an indexed sub-stream, e.g. one per record or per bootstrap iter.
pub fn substream_indexed(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(
        mix(root ^ fnv1a(label.as_bytes())).wrapping_add(index),
    ))
}
