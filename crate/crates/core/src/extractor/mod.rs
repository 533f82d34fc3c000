//! Trevisan-style strong extractor: a one-bit polynomial-hashing extractor
//! applied to the seed positions of a block weak design.
//!
//! Conventions, fixed so outputs are reproducible:
//! - bit strings are read most significant bit first;
//! - the input is cut into `l`-bit coefficients, `l = ⌊w/2⌋`, the first
//!   coefficient being the highest-degree one and the last one zero-padded;
//! - a `w`-bit seed slice gives `α` (first `l` bits) and `γ` (next `l` bits);
//!   the last bit is unused when `w` is odd;
//! - the output bit is the parity of `p(α) ∧ γ`.

mod bits;
mod design;
mod gf2;
mod moduli;
mod params;

pub use bits::BitString;
pub use design::{WeakDesign, weak_design};
pub use gf2::{Backend, field_mul};
pub use moduli::{MAX_DEGREE, MODULUS_TABLE_VERSION, Modulus, modulus};
pub use params::ExtractorParams;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractorError {
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid extractor parameters: {0}")]
    InvalidParams(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("field GF(2^{0}) is not supported")]
    UnsupportedField(u32),
}

/// Self-describing parameter header stored next to every extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionHeader {
    pub m: u64,
    pub k: u64,
    pub eps_x: f64,
    pub w: u64,
    pub blocks: u64,
    pub d_provided: u64,
    pub d_used: u64,
    pub field_bits: u32,
    pub modulus: Vec<u32>,
    pub modulus_table: String,
}

impl ExtractorParams {
    pub fn header(&self) -> Result<ExtractionHeader, ExtractorError> {
        let l = self.field_bits();
        Ok(ExtractionHeader {
            m: self.m,
            k: self.k,
            eps_x: self.eps_x,
            w: self.w,
            blocks: self.blocks,
            d_provided: self.d_provided,
            d_used: self.d_used,
            field_bits: l,
            modulus: modulus(l)?.exponents(),
            modulus_table: MODULUS_TABLE_VERSION.to_string(),
        })
    }
}

/// `(α, γ)` from a seed slice of `w ≥ 2` bits.
fn keys<const N: usize>(slice: &BitString, l: usize) -> ([u64; N], [u64; N]) {
    (slice.read_uint::<N>(0, l), slice.read_uint::<N>(l, l))
}

fn parity<const N: usize>(a: &[u64; N], b: &[u64; N]) -> bool {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum::<u32>() % 2 == 1
}

/// Index of the last set bit, if any.
fn last_one(input: &BitString) -> Option<usize> {
    (0..input.len().div_ceil(64)).rev().find_map(|q| {
        let w = input.window64(64 * q);
        (w != 0).then(|| 64 * q + 63 - w.trailing_zeros() as usize)
    })
}

fn evaluate_n<const N: usize>(
    input: &BitString,
    slices: &[BitString],
    l: u32,
    backend: Backend,
) -> Result<Vec<bool>, ExtractorError> {
    let m = modulus(l)?;
    let lu = l as usize;
    let s = input.len().div_ceil(lu);
    // Trailing zero coefficients only multiply the result by α^zeros.
    let nonzero = last_one(input).map_or(0, |p| p / lu + 1);
    let zeros = (s - nonzero) as u64;
    let coeffs: Vec<[u64; N]> = (0..nonzero).map(|j| input.read_uint::<N>(j * lu, lu)).collect();
    let (alphas, gammas): (Vec<[u64; N]>, Vec<[u64; N]>) = slices.iter().map(|sl| keys::<N>(sl, lu)).unzip();

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let per = alphas.len().div_ceil(threads).max(8);
    let mut values: Vec<[u64; N]> = Vec::with_capacity(alphas.len());
    if alphas.len() <= per {
        values = gf2::horner(&coeffs, &alphas, &m, backend);
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = alphas
                .chunks(per)
                .map(|chunk| scope.spawn(|| gf2::horner(&coeffs, chunk, &m, backend)))
                .collect();
            for h in handles {
                values.extend(h.join().expect("extraction worker panicked"));
            }
        });
    }
    Ok(values
        .iter()
        .zip(&alphas)
        .zip(&gammas)
        .map(|((v, a), g)| {
            let v = if zeros > 0 {
                gf2::mul(v, &gf2::pow(a, zeros, &m, backend), &m, backend)
            } else {
                *v
            };
            parity(&v, g)
        })
        .collect())
}

/// One output bit per seed slice, all slices of the same length `w`.
fn evaluate(input: &BitString, slices: &[BitString], backend: Backend) -> Result<Vec<bool>, ExtractorError> {
    let w = slices.first().map_or(0, |s| s.len());
    if w < 2 {
        return Err(ExtractorError::InvalidParams(format!(
            "seed slices need at least 2 bits, got {w}"
        )));
    }
    if let Some(bad) = slices.iter().find(|s| s.len() != w) {
        return Err(ExtractorError::LengthMismatch {
            what: "seed slice",
            expected: w,
            got: bad.len(),
        });
    }
    if input.is_empty() {
        return Err(ExtractorError::InvalidInput("empty input".into()));
    }
    let l = (w / 2) as u32;
    match gf2::limbs_for(l) {
        1 => evaluate_n::<1>(input, slices, l, backend),
        2 => evaluate_n::<2>(input, slices, l, backend),
        3 => evaluate_n::<3>(input, slices, l, backend),
        4 => evaluate_n::<4>(input, slices, l, backend),
        5 => evaluate_n::<5>(input, slices, l, backend),
        6 => evaluate_n::<6>(input, slices, l, backend),
        7 => evaluate_n::<7>(input, slices, l, backend),
        8 => evaluate_n::<8>(input, slices, l, backend),
        _ => Err(ExtractorError::UnsupportedField(l)),
    }
}

/// One-bit extractor on a `w`-bit seed slice.
pub fn one_bit_extract(input: &BitString, seed_slice: &BitString) -> Result<bool, ExtractorError> {
    Ok(evaluate(input, std::slice::from_ref(seed_slice), Backend::Auto)?[0])
}

/// One-bit extractor applied to each of `seed_slices`, all of the same length.
pub fn one_bit_extract_many(input: &BitString, seed_slices: &[BitString]) -> Result<Vec<bool>, ExtractorError> {
    evaluate(input, seed_slices, Backend::Auto)
}

/// Statistical-distance bound of the one-bit extractor over `GF(2^l)` with
/// `s` coefficients, for a source of min-entropy `h` bits:
/// `½·√((s − 1)·2^−l + 2^(1−h))`. The seeded hash family is
/// `(s − 1)/2^l`-almost universal, so this is the leftover hash lemma.
pub fn one_bit_error_bound(l: u32, s: u64, h: f64) -> f64 {
    0.5 * ((s.saturating_sub(1)) as f64 * 2f64.powi(-(l as i32)) + 2f64.powf(1.0 - h)).sqrt()
}

/// Bound on the `(output, seed)` distance from uniform of the `k`-bit
/// extractor for a classical source of min-entropy `h`. Bit `i` sees a
/// source whose min-entropy has dropped by the design overlap weight of set
/// `i`, the number of advice bits needed to recompute the earlier outputs.
pub fn strong_error_bound(params: &ExtractorParams, design: &WeakDesign, h: f64) -> f64 {
    let l = params.field_bits();
    let s = params.coefficients();
    (0..design.len())
        .map(|i| one_bit_error_bound(l, s, h - design.overlap_weight(i)).min(0.5))
        .sum()
}

/// `k`-bit extraction: bit `i` is the one-bit extractor on the seed bits at
/// the positions of design set `i`, in ascending order.
pub fn extract(
    input: &BitString,
    seed: &BitString,
    params: &ExtractorParams,
    design: &WeakDesign,
) -> Result<BitString, ExtractorError> {
    extract_with(input, seed, params, design, Backend::Auto)
}

pub fn extract_with(
    input: &BitString,
    seed: &BitString,
    params: &ExtractorParams,
    design: &WeakDesign,
    backend: Backend,
) -> Result<BitString, ExtractorError> {
    let check = |what, expected: u64, got: usize| {
        if got as u64 == expected {
            Ok(())
        } else {
            Err(ExtractorError::LengthMismatch {
                what,
                expected: expected as usize,
                got,
            })
        }
    };
    check("input", params.m, input.len())?;
    check("seed", params.d_provided, seed.len())?;
    check("design", params.k, design.len())?;
    if design.w != params.w {
        return Err(ExtractorError::InvalidParams(format!(
            "design built for w = {}, parameters have w = {}",
            design.w, params.w
        )));
    }
    let slices: Vec<BitString> = design.sets.iter().map(|s| seed.gather(s)).collect();
    Ok(BitString::from_bools(&evaluate(input, &slices, backend)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{Rng, SeedableRng};

    /// Independent evaluation on `u64` field elements: explicit powers of α,
    /// bitwise shift-and-add multiplication, bit-by-bit reduction.
    fn oracle_bit(input: &[bool], seed: &[bool]) -> bool {
        let w = seed.len();
        let l = w / 2;
        let m = modulus(l as u32).unwrap();
        let f: u64 = m.exponents().iter().fold(0, |acc, e| acc | 1 << e);
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
        let read = |bits: &[bool], start: usize| -> u64 {
            (0..l).fold(0, |acc, t| {
                (acc << 1) | bits.get(start + t).copied().unwrap_or(false) as u64
            })
        };
        let alpha = read(seed, 0);
        let gamma = read(seed, l);
        let s = input.len().div_ceil(l);
        let mut value = 0u64;
        for j in 0..s {
            let mut power = 1u64;
            for _ in 0..(s - 1 - j) {
                power = mulmod(power, alpha);
            }
            value ^= mulmod(read(input, j * l), power);
        }
        (value & gamma).count_ones() % 2 == 1
    }

    fn to_bits(v: u64, n: usize) -> Vec<bool> {
        (0..n).rev().map(|j| (v >> j) & 1 == 1).collect()
    }

    #[test]
    #[allow(clippy::unusual_byte_groupings)]
    fn trivial_cases() {
        let seed = BitString::from_bools(&to_bits(0b10110_11101_1, 11));
        assert!(!one_bit_extract(&BitString::zeros(20), &seed).unwrap());
        let no_gamma = BitString::from_bools(&to_bits(0b10110_00000_1, 11));
        let input = BitString::from_bools(&to_bits(0xBEEF1, 20));
        assert!(!one_bit_extract(&input, &no_gamma).unwrap());
    }

    #[test]
    fn one_bit_matches_oracle_exhaustively_in_gf32() {
        // w = 11, l = 5, m = 20: every (α, γ) for a spread of inputs, both
        // values of the ignored bit.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..64 {
            let x = rng.next_u64() & 0xFFFFF;
            let input = to_bits(x, 20);
            let bs = BitString::from_bools(&input);
            for seed in 0..1u64 << 11 {
                let sb = to_bits(seed, 11);
                assert_eq!(
                    one_bit_extract(&bs, &BitString::from_bools(&sb)).unwrap(),
                    oracle_bit(&input, &sb),
                    "input {x:#x} seed {seed:#b}"
                );
            }
        }
    }

    #[test]
    fn one_bit_matches_oracle_across_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for w in [2usize, 3, 5, 7, 13, 29, 64, 127] {
            for m in [1usize, 7, 24, 63, 64, 65, 200] {
                for _ in 0..20 {
                    let input: Vec<bool> = (0..m).map(|_| rng.next_u32() & 1 == 1).collect();
                    let seed: Vec<bool> = (0..w).map(|_| rng.next_u32() & 1 == 1).collect();
                    let got = one_bit_extract(&BitString::from_bools(&input), &BitString::from_bools(&seed)).unwrap();
                    assert_eq!(got, oracle_bit(&input, &seed), "w={w} m={m}");
                }
            }
        }
    }

    #[test]
    fn trailing_zero_shortcut_matches_full_horner() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut input = BitString::default();
        for _ in 0..700 {
            input.push(rng.next_u32() & 1 == 1);
        }
        input.pad_to(5000);
        let seeds: Vec<BitString> = (0..9)
            .map(|_| BitString::from_bools(&(0..631).map(|_| rng.next_u32() & 1 == 1).collect::<Vec<_>>()))
            .collect();
        let fast = evaluate(&input, &seeds, Backend::Auto).unwrap();
        // Setting input bit 4999 makes the last coefficient nonzero, so the
        // full Horner pass runs. That bit sits at offset t = 4999 − 15·315 = 274
        // of the constant coefficient, adding x^(314 − t) to p(α); the output
        // flips iff the matching bit of γ, seed position 315 + t, is set.
        let mut full = input.clone();
        full.set(4999, true);
        let flipped = evaluate(&full, &seeds, Backend::Software).unwrap();
        for (i, s) in seeds.iter().enumerate() {
            assert_eq!(fast[i] ^ s.get(315 + 274), flipped[i], "seed {i}");
        }
    }

    #[test]
    fn length_errors() {
        let p = ExtractorParams::from_delta(64, 3, 0.01).unwrap();
        let d = weak_design(&p);
        let seed = BitString::zeros(p.d_provided as usize);
        assert!(extract(&BitString::zeros(63), &seed, &p, &d).is_err());
        assert!(extract(&BitString::zeros(64), &BitString::zeros(10), &p, &d).is_err());
        assert!(one_bit_extract(&BitString::zeros(8), &BitString::zeros(1)).is_err());
    }

    #[test]
    fn extract_is_per_set_one_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ExtractorParams::from_delta(100, 3, 0.05).unwrap();
        let d = weak_design(&p);
        let input = BitString::from_bools(&(0..100).map(|_| rng.next_u32() & 1 == 1).collect::<Vec<_>>());
        let seed = BitString::from_bools(&(0..p.d_provided).map(|_| rng.next_u32() & 1 == 1).collect::<Vec<_>>());
        let out = extract(&input, &seed, &p, &d).unwrap();
        assert_eq!(out.len(), 3);
        for (i, set) in d.sets.iter().enumerate() {
            assert_eq!(out.get(i), one_bit_extract(&input, &seed.gather(set)).unwrap());
        }
        for _ in 0..100 {
            assert_eq!(extract(&input, &seed, &p, &d).unwrap(), out);
        }
        assert_eq!(extract_with(&input, &seed, &p, &d, Backend::Software).unwrap(), out);
    }

    #[test]
    fn header_names_the_modulus() {
        let p = ExtractorParams::new(104_962_064, 512, 0.2 * crate::reference::EPSILON).unwrap();
        let h = p.header().unwrap();
        assert_eq!(h.field_bits, 315);
        assert_eq!(h.modulus, vec![315, 10, 9, 1, 0]);
        assert_eq!(h.modulus_table, MODULUS_TABLE_VERSION);
    }
}
