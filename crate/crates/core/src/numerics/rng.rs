//! Seeded randomness. Every random draw in the pipeline flows from one run
//! seed through a named sub-seed, so any stage can be replayed in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named domains for sub-seed derivation. The numeric values are part of the
/// on-disk reproducibility story (keys record the seeds they came from), so
/// they must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Scene = 1,
    Pretrain = 2,
    Codebook = 3,
    Signature = 4,
    KeyPose = 5,
    KeySelect = 6,
    Train = 7,
    Distortion = 8,
    Attack = 9,
    ExtractorInit = 10,
    Verify = 11,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 step; the standard finalizer keeps nearby seeds uncorrelated.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the sub-seed for a named stage of a run.
pub fn subseed(run_seed: u64, domain: Domain) -> u64 {
    splitmix64(run_seed ^ (domain as u64).wrapping_mul(GOLDEN))
}

/// Sub-seed with an extra index (e.g. per-attack-trial streams).
pub fn subseed_indexed(run_seed: u64, domain: Domain, index: u64) -> u64 {
    splitmix64(subseed(run_seed, domain) ^ index.wrapping_mul(GOLDEN))
}

/// Counter-based uniform in [0, 1): hash of (seed, a, b, c) with no state.
/// Used for per-(pixel, sample) ray jitter so that rendering any subset of
/// pixels reproduces exactly the values a full-frame render would use.
pub fn hash01(seed: u64, a: u64, b: u64, c: u64) -> f32 {
    let mut z = seed;
    z = splitmix64(z ^ a.wrapping_mul(0xa076_1d64_78bd_642f));
    z = splitmix64(z ^ b.wrapping_mul(0xe703_7ed1_a0b4_28db));
    z = splitmix64(z ^ c.wrapping_mul(0x8ebc_6af0_9c88_c6e3));
    // Top 24 bits -> [0, 1) exactly representable in f32.
    (z >> 40) as f32 / (1u64 << 24) as f32
}

/// Stream RNG for a stage.
pub fn rng(run_seed: u64, domain: Domain) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(run_seed, domain))
}

/// Stream RNG for an indexed trial within a stage.
pub fn rng_indexed(run_seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed_indexed(run_seed, domain, index))
}

/// Standard normal via Box-Muller on ChaCha output; used for parameter init
/// where we want an explicit, stable distribution rather than a crate's
/// (potentially version-dependent) sampler.
pub fn normal(rng: &mut ChaCha8Rng, mean: f32, std: f32) -> f32 {
    use rand::Rng;
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-12 {
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            return mean + std * z as f32;
        }
    }
}
