//! Deterministic RNG substream derivation.
//!
//! Every stochastic site derives its own stream from `(master seed, tags)`,
//! so group members can be sampled in any order (or concurrently) without
//! changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha stream from a master seed and a list of stream tags.
///
/// Tags are mixed in order, so `substream(s, &[a, b])` and
/// `substream(s, &[b, a])` are independent streams.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x6c62272e07bb0142);
    for (i, &tag) in tags.iter().enumerate() {
        state = splitmix64(state ^ splitmix64(tag.wrapping_add(i as u64 + 1)));
    }
    ChaCha8Rng::seed_from_u64(state)
}
