//! Deterministic RNG derivation. Every stochastic component draws from a
//! stream keyed by (master seed, purpose, index), so any iteration can be
//! reproduced in isolation and checkpoint resume replays the exact noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable stream labels; the numeric values are part of the checkpoint
/// compatibility contract.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 1,
    RayBatch = 2,
    Stratified = 3,
    Importance = 4,
    RegPoints = 5,
    SynthScene = 6,
    Perturb = 7,
    NoiseDraw = 8,
    LatentDerive = 9,
    ValNoise = 10,
}

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 round
    h = h.wrapping_add(v).wrapping_add(0x9e3779b97f4a7c15);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for (seed, stream, index) — typically index = iteration.
pub fn derive(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, stream as u64), index))
}
