//! Deterministic, counter-based random-number substreams.
//!
//! Monte Carlo work is spread over many independent units (one per scan
//! point, one per integration window, one per byte stream). Each unit gets
//! its own ChaCha8 generator keyed by the master seed plus a label path,
//! so the draw sequence of a unit depends only on its coordinates — never
//! on scheduling order or thread count. Two runs with the same seed produce
//! identical output at any parallelism level.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep substreams from unrelated operations disjoint even
/// when their numeric labels collide.
pub mod domain {
    pub const WINDOW: u64 = 0x5749_4e44;
    pub const STREAM: u64 = 0x5354_524d;
    pub const SCAN: u64 = 0x5343_414e;
    pub const DEMO: u64 = 0x4445_4d4f;
}

/// SplitMix64 finalizer; full-avalanche mixing of one 64-bit word.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator for the work unit identified by
/// `labels`, e.g. `[domain::SCAN, plane, point]`. The same seed and label
/// path always yield the same generator; any change to either decorrelates
/// the stream.
pub fn substream(master_seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut state = derive_seed(master_seed, labels);
    // Expand the mixed state into a 256-bit ChaCha key.
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        state = mix64(state.wrapping_add(i as u64 + 1));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed for the work unit identified by `labels`, for
/// handing to an API that takes a master seed of its own. Uses the same
/// mixing chain as [`substream`].
pub fn derive_seed(master_seed: u64, labels: &[u64]) -> u64 {
    let mut state = mix64(master_seed);
    for &label in labels {
        state = mix64(state ^ mix64(label));
    }
    state
}
