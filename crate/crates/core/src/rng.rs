//! Deterministic random streams.
//!
//! Everything stochastic in the pipeline (weight init, scene synthesis,
//! shuffling, crop sampling, the replay buffer) draws from a ChaCha stream
//! derived from the single root seed plus a tag path. Streams derived from
//! the same `(seed, tags)` are identical across runs and platforms, which is
//! what makes epoch-boundary checkpoint resume exact.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard 64-bit finalizer used to fan a seed out
/// into independent stream keys.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream from the root seed and a tag path,
/// e.g. `stream(seed, &[tags::SHUFFLE_IR, epoch])`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ 0x51_7c_c1_b7_27_22_0a_95);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag));
    }
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream tags; kept in one place so call sites cannot collide.
pub mod tags {
    pub const WEIGHT_INIT: u64 = 1;
    pub const SCENE: u64 = 2;
    pub const SHUFFLE_IR: u64 = 3;
    pub const SHUFFLE_VI: u64 = 4;
    pub const CROP: u64 = 5;
    pub const POOL_VI: u64 = 6;
    pub const POOL_IR: u64 = 7;
}

/// One standard normal draw via Box-Muller.
///
/// Implemented by hand (rather than a distributions crate) so the value
/// stream is pinned by this crate alone.
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    // u1 in (0, 1], u2 in [0, 1)
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform draw in `[0, 1)`.
pub fn uniform<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform integer in `[lo, hi]` (inclusive), `hi >= lo`.
pub fn uniform_usize<R: RngCore>(rng: &mut R, lo: usize, hi: usize) -> usize {
    debug_assert!(hi >= lo);
    let span = (hi - lo) as u64 + 1;
    lo + (rng.next_u64() % span) as usize
}

/// In-place Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T, R: RngCore>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_usize(rng, 0, i);
        items.swap(i, j);
    }
}
