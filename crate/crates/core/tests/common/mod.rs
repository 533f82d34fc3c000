//! Helpers shared by the integration suites.
#![allow(dead_code)]

use std::collections::HashSet;

use diqrand_core::extractor::{BitString, modulus, one_bit_extract_many};
use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

/// `v` as `n` bits, most significant first.
pub fn bits(v: u64, n: usize) -> BitString {
    BitString::from_bools(&(0..n).rev().map(|j| (v >> j) & 1 == 1).collect::<Vec<_>>())
}

/// Support of a flat source: `2^h` distinct random `m`-bit strings.
pub fn random_flat_source(m: u32, h: u32, seed: u64) -> Vec<u64> {
    assert!(h <= m && m <= 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(1 << h);
    while out.len() < 1 << h {
        let x = rng.next_u64() & ((1u64 << m) - 1);
        if seen.insert(x) {
            out.push(x);
        }
    }
    out
}

/// Support of the affine source whose first `m − h` bits are fixed to `prefix`.
pub fn affine_source(m: u32, h: u32, prefix: u64) -> Vec<u64> {
    let hi = (prefix & ((1u64 << (m - h)) - 1)) << h;
    (0..1u64 << h).map(|x| hi | x).collect()
}

/// `table[x][v]`: the one-bit output on input `source[x]` with the `w`-bit
/// seed slice of value `v`, for every slice.
pub fn one_bit_table(source: &[u64], m: u32, w: u32) -> Vec<Vec<bool>> {
    let slices: Vec<BitString> = (0..1u64 << w).map(|v| bits(v, w as usize)).collect();
    source
        .iter()
        .map(|&x| one_bit_extract_many(&bits(x, m as usize), &slices).unwrap())
        .collect()
}

/// `E_seed |Pr[out = 1] − ½|` over all slices, from a table.
pub fn one_bit_distance(table: &[Vec<bool>]) -> f64 {
    let n = table.len() as f64;
    let slices = table[0].len();
    (0..slices)
        .map(|v| {
            let ones = table.iter().filter(|row| row[v]).count() as f64;
            (ones / n - 0.5).abs()
        })
        .sum::<f64>()
        / slices as f64
}

/// Distance of the `k`-bit output from uniform for one seed, the output on
/// source element `x` being `out(x)`.
pub fn k_bit_distance(k: usize, n: usize, out: impl Fn(usize) -> usize) -> f64 {
    let mut counts = vec![0u32; 1 << k];
    for x in 0..n {
        counts[out(x)] += 1;
    }
    let u = 1.0 / (1 << k) as f64;
    0.5 * counts.iter().map(|&c| (c as f64 / n as f64 - u).abs()).sum::<f64>()
}

/// Independent one-bit oracle on `u64` field elements: bitwise products,
/// bit-by-bit reduction and explicit powers of α.
pub fn oracle_bit(x: u64, m: u32, seed: u64, w: u32) -> bool {
    let l = w / 2;
    let f: u64 = modulus(l).unwrap().exponents().iter().fold(0, |acc, e| acc | 1 << e);
    let mulmod = |a: u64, b: u64| -> u64 {
        let mut r: u128 = 0;
        for i in 0..l {
            if (b >> i) & 1 == 1 {
                r ^= (a as u128) << i;
            }
        }
        for d in (l..2 * l).rev() {
            if (r >> d) & 1 == 1 {
                r ^= (f as u128) << (d - l);
            }
        }
        r as u64
    };
    let mask = (1u64 << l) - 1;
    let alpha = (seed >> (w - l)) & mask;
    let gamma = (seed >> (w - 2 * l)) & mask;
    let s = m.div_ceil(l);
    // Coefficient j covers input bits [j·l, (j+1)·l), zero-padded at the end.
    let padded = x << (s * l - m);
    let mut value = 0;
    for j in 0..s {
        let c = (padded >> ((s - 1 - j) * l)) & mask;
        let mut power = 1;
        for _ in 0..s - 1 - j {
            power = mulmod(power, alpha);
        }
        value ^= mulmod(c, power);
    }
    (value & gamma).count_ones() % 2 == 1
}
