//! Deterministic RNG streams derived from one root seed.
//!
//! Every random consumer (parameter init, reparameterization noise, LSH
//! probes, negative sampling, batch shuffling) draws from its own stream named
//! by a tag, so adding or removing one consumer never perturbs the draws seen
//! by another. Identical (seed, tag) pairs yield identical streams on every
//! platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stream of randomness for one named consumer.
pub fn stream(root_seed: u64, tag: &str) -> ChaCha8Rng {
    let mut state = root_seed ^ fnv1a64(tag.as_bytes());
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
