//! Deterministic random streams.
//!
//! One master seed fans out to named sub-streams so that a change in one
//! component (say, the sampler) does not perturb draws elsewhere (say,
//! parameter initialization).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit hash of a stream name (FNV-1a). Not `DefaultHasher`, whose
/// output may change across Rust releases.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the sub-seed of a named stream from the master seed.
pub fn stream_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a(name))
}

/// RNG for a named sub-stream of `master`.
pub fn stream_rng(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, name))
}
