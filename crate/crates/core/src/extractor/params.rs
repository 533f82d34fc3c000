//! Extractor parameters: design set size, block count and seed lengths.

use serde::{Deserialize, Serialize};

use super::ExtractorError;

/// Parameters of a `k`-bit extraction from an `m`-bit input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub m: u64,
    pub k: u64,
    pub eps_x: f64,
    /// Trace-distance budget, `ε_x²/2`.
    pub delta_x: f64,
    /// Prime size of each design set.
    pub w: u64,
    pub blocks: u64,
    pub d_provided: u64,
    pub d_used: u64,
}

pub(crate) fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

pub(crate) fn next_prime_above(n: u64) -> u64 {
    let mut p = n + 1;
    while !is_prime(p) {
        p += 1;
    }
    p
}

/// `max(2, 1 + ⌈(log₂(k−e) − log₂(w−e)) / (log₂e − log₂(e−1))⌉)`; two blocks
/// when `k ≤ e + 1`, where the logarithm is undefined or negative.
pub(crate) fn block_count(k: u64, w: u64) -> u64 {
    use std::f64::consts::E;
    let kf = k as f64;
    if kf <= E + 1.0 {
        return 2;
    }
    let num = (kf - E).log2() - (w as f64 - E).log2();
    let den = E.log2() - (E - 1.0).log2();
    let steps = (num / den).ceil();
    if steps <= 1.0 { 2 } else { 1 + steps as u64 }
}

/// Number of sets placed in each block. A block holding `R` remaining sets
/// passes `⌈e + (R − e)(e − 1)/e⌉` of them on when `R > w`; the last
/// provided block takes whatever remains.
pub(crate) fn block_sizes(k: u64, w: u64, blocks: u64) -> Vec<u64> {
    use std::f64::consts::E;
    let mut sizes = Vec::new();
    let mut remaining = k;
    for b in 0..blocks {
        if remaining == 0 {
            break;
        }
        if remaining <= w || b + 1 == blocks {
            sizes.push(remaining);
            break;
        }
        let next = (E + (remaining as f64 - E) * (E - 1.0) / E).ceil() as u64;
        let take = remaining.saturating_sub(next).max(1);
        sizes.push(take);
        remaining -= take;
    }
    sizes
}

impl ExtractorParams {
    /// Parameters for total extractor error `eps_x`, with `δ_x = ε_x²/2`.
    pub fn new(m: u64, k: u64, eps_x: f64) -> Result<Self, ExtractorError> {
        if !(eps_x > 0.0 && eps_x <= 1.0) {
            return Err(ExtractorError::InvalidParams(format!("eps_x = {eps_x} not in (0, 1]")));
        }
        Self::build(m, k, eps_x, eps_x * eps_x / 2.0)
    }

    /// Parameters for a given trace-distance budget `δ_x`.
    pub fn from_delta(m: u64, k: u64, delta_x: f64) -> Result<Self, ExtractorError> {
        if !(delta_x > 0.0 && delta_x <= 0.5) {
            return Err(ExtractorError::InvalidParams(format!(
                "delta_x = {delta_x} not in (0, 1/2]"
            )));
        }
        Self::build(m, k, (2.0 * delta_x).sqrt(), delta_x)
    }

    fn build(m: u64, k: u64, eps_x: f64, delta_x: f64) -> Result<Self, ExtractorError> {
        if k == 0 || m < k {
            return Err(ExtractorError::InvalidParams(format!(
                "need m ≥ k ≥ 1, got m = {m}, k = {k}"
            )));
        }
        // log₂(4·m·k²/δ_x²), evaluated in the log domain.
        let log_arg = 2.0 + (m as f64).log2() + 2.0 * (k as f64).log2() - 2.0 * delta_x.log2();
        let w = next_prime_above(2 * log_arg.ceil() as u64);
        let blocks = block_count(k, w);
        let used = block_sizes(k, w, blocks).len() as u64;
        Ok(Self {
            m,
            k,
            eps_x,
            delta_x,
            w,
            blocks,
            d_provided: blocks * w * w,
            d_used: used * w * w,
        })
    }

    /// Field degree `l = ⌊w/2⌋` of the one-bit extractor.
    pub fn field_bits(&self) -> u32 {
        (self.w / 2) as u32
    }

    /// Number of `l`-bit coefficients of the input polynomial.
    pub fn coefficients(&self) -> u64 {
        self.m.div_ceil(self.field_bits() as u64)
    }
}
