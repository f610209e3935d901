//! Seed derivation. Every random stream in the pipeline is a ChaCha8 generator
//! keyed by a hash of the master seed and a path of integers naming the
//! consumer, so results never depend on evaluation order or thread count.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type PipelineRng = ChaCha8Rng;

/// Stream tags for the stages of a run.
pub mod stage {
    pub const DATA: u64 = 1;
    pub const SHOTS: u64 = 2;
    pub const ENCODER: u64 = 3;
    pub const DENOISER: u64 = 4;
    pub const GENERATION: u64 = 5;
    pub const BASIS: u64 = 6;
    pub const CONDITIONS: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `path` into `master`. Distinct paths give statistically independent
/// seeds; the mapping is fixed forever since checkpoints depend on it.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

pub fn seeded(seed: u64) -> PipelineRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived(master: u64, path: &[u64]) -> PipelineRng {
    seeded(derive_seed(master, path))
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}
