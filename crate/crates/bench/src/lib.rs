//! Shared fixtures for the criterion benchmarks.

use diqrand_core::reference;
use diqrand_core::{ConditionalDistribution, InputDistribution, PefTable, SimConfig};

/// Published calibrated behavior of instance 1.
pub fn instance1_behavior() -> ConditionalDistribution {
    ConditionalDistribution::from_approx(reference::CALIBRATED_DISTRIBUTIONS[0]).expect("published behavior is valid")
}

/// Published PEF of instance 1 at the accumulation scaling.
pub fn instance1_pef() -> PefTable {
    PefTable::new(reference::PEFS[0], reference::BETAS[0], reference::F_MAX).expect("published PEF is valid")
}

/// Simulator config for `n` trials of instance 1.
pub fn instance1_sim(n: u64, rng_seed: u64) -> SimConfig {
    SimConfig::new(instance1_behavior(), InputDistribution::uniform(), n, rng_seed)
}

/// Deterministic pseudo-random bytes for inputs and seeds.
pub fn filler_bytes(len: usize, salt: u32) -> Vec<u8> {
    (0..len as u32)
        .map(|i| (i.wrapping_add(salt).wrapping_mul(2_654_435_761) >> 13) as u8)
        .collect()
}
