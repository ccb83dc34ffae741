//! Keyed random streams.
//!
//! Every stochastic quantity in the simulator is drawn from a ChaCha stream
//! whose seed is derived from a tuple of integers, so results never depend on
//! the order in which work happens to be scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream for the key `parts`.
pub fn keyed(parts: &[u64]) -> StreamRng {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
        h = splitmix64(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

// Domain tags keep streams for different purposes disjoint.
pub(crate) const TAG_FIXED_GAIN: u64 = 0x6761_696e;
pub(crate) const TAG_OFFSET: u64 = 0x6f66_6673;
pub(crate) const TAG_TEMPORAL: u64 = 0x7465_6d70;
