//! Deterministic random-number streams.
//!
//! Every stochastic stage (data generation, weight init, batch order, SSA
//! noise, loss-weight draws, trigger placement, corruption noise, ...) pulls
//! from its own named ChaCha8 stream derived from one master seed. Streams
//! are independent, so adding draws to one stage never shifts another, and a
//! single `u64` in a config file pins the whole experiment.
//!
//! All scalar draws happen in `f64` and are converted afterwards, so the
//! sequence of sampled values is identical whether the pipeline runs in
//! `f32` or `f64`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Canonical stream names. Using constants (rather than ad-hoc literals)
/// keeps the seed derivation greppable and typo-proof.
pub mod streams {
    pub const DATA: &str = "data";
    pub const MODEL_INIT: &str = "model-init";
    pub const TRAIN_SHUFFLE: &str = "train-shuffle";
    pub const BATCH: &str = "batch";
    pub const SSA_NOISE: &str = "ssa-noise";
    pub const SSA_MASK: &str = "ssa-mask";
    pub const WEIGHTS: &str = "weights";
    pub const TRIGGER_PLACEMENT: &str = "trigger-placement";
    pub const CORRUPTION: &str = "corruption";
    pub const FRAMES: &str = "frames";
    pub const SUITE: &str = "suite";
}

/// FNV-1a, fixed here rather than `DefaultHasher` because the derivation
/// must stay stable across Rust releases.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The RNG for one named stage of an experiment.
pub fn stream_rng(master_seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master_seed ^ fnv1a(stream))
}

/// One standard-normal draw, scaled. A zero sigma still consumes a draw so
/// stream positions do not depend on config values.
pub fn normal_f64<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * sigma
}

/// One uniform draw from `[lo, hi)`.
pub fn uniform_f64<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Fisher–Yates shuffle of indices `0..n`, used for epoch orderings.
pub fn shuffled_indices<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
