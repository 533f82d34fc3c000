//! Low-weight irreducible polynomials over GF(2).
//!
//! For each degree `l` the modulus is the irreducible trinomial
//! `x^l + x^k + 1` with the smallest `k`, or, when none exists, the
//! irreducible pentanomial `x^l + x^k3 + x^k2 + x^k1 + 1` with the
//! lexicographically smallest `(k3, k2, k1)`. The rule is fixed, so the table
//! is reproducible; it is versioned by [`MODULUS_TABLE_VERSION`].

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use super::ExtractorError;

pub const MODULUS_TABLE_VERSION: &str = "gf2-lowweight-v1";

/// Largest supported field degree.
pub const MAX_DEGREE: u32 = 512;

/// `x^degree + Σ x^tap`; `taps` holds the lower exponents in decreasing order
/// and always ends with 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modulus {
    pub degree: u32,
    taps: [u32; 4],
    n_taps: usize,
}

impl Modulus {
    pub fn new(degree: u32, lower: &[u32]) -> Self {
        let mut taps = [0u32; 4];
        assert!(lower.len() <= 4 && lower.iter().all(|&t| t < degree));
        taps[..lower.len()].copy_from_slice(lower);
        taps[..lower.len()].sort_unstable_by(|a, b| b.cmp(a));
        Self {
            degree,
            taps,
            n_taps: lower.len(),
        }
    }

    pub fn taps(&self) -> &[u32] {
        &self.taps[..self.n_taps]
    }

    /// All exponents with nonzero coefficient, highest first.
    pub fn exponents(&self) -> Vec<u32> {
        std::iter::once(self.degree)
            .chain(self.taps().iter().copied())
            .collect()
    }

    fn to_poly(self) -> Poly {
        let mut p = Poly::zero();
        for e in self.exponents() {
            p.flip(e as usize);
        }
        p
    }
}

impl std::fmt::Display for Modulus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let terms: Vec<String> = self
            .exponents()
            .iter()
            .map(|&e| match e {
                0 => "1".to_string(),
                1 => "x".to_string(),
                _ => format!("x^{e}"),
            })
            .collect();
        write!(f, "{}", terms.join(" + "))
    }
}

/// Dense polynomial over GF(2), little-endian words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Poly(Vec<u64>);

impl Poly {
    pub(crate) fn zero() -> Self {
        Poly(Vec::new())
    }

    pub(crate) fn from_words(w: &[u64]) -> Self {
        let mut p = Poly(w.to_vec());
        p.trim();
        p
    }

    #[cfg(test)]
    pub(crate) fn words(&self) -> &[u64] {
        &self.0
    }

    fn trim(&mut self) {
        while self.0.last() == Some(&0) {
            self.0.pop();
        }
    }

    pub(crate) fn flip(&mut self, e: usize) {
        if self.0.len() <= e / 64 {
            self.0.resize(e / 64 + 1, 0);
        }
        self.0[e / 64] ^= 1 << (e % 64);
        self.trim();
    }

    pub(crate) fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    /// Degree, or `None` for the zero polynomial.
    pub(crate) fn degree(&self) -> Option<usize> {
        self.0
            .last()
            .map(|w| 64 * (self.0.len() - 1) + 63 - w.leading_zeros() as usize)
    }

    fn xor_shifted(&mut self, other: &Poly, shift: usize) {
        let (q, r) = (shift / 64, shift % 64);
        let need = other.0.len() + q + 1;
        if self.0.len() < need {
            self.0.resize(need, 0);
        }
        for (i, &w) in other.0.iter().enumerate() {
            self.0[i + q] ^= w << r;
            if r != 0 {
                self.0[i + q + 1] ^= w >> (64 - r);
            }
        }
        self.trim();
    }

    /// Remainder modulo `m` by shift-and-subtract.
    pub(crate) fn rem(&self, m: &Poly) -> Poly {
        let dm = m.degree().expect("nonzero modulus");
        let mut r = self.clone();
        while let Some(dr) = r.degree() {
            if dr < dm {
                break;
            }
            r.xor_shifted(m, dr - dm);
        }
        r
    }

    /// Product by shift-and-add.
    #[cfg(test)]
    pub(crate) fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        if let Some(d) = other.degree() {
            for e in 0..=d {
                if (other.0[e / 64] >> (e % 64)) & 1 == 1 {
                    out.xor_shifted(self, e);
                }
            }
        }
        out
    }

    fn square(&self) -> Poly {
        let mut out = vec![0u64; 2 * self.0.len()];
        for (i, &w) in self.0.iter().enumerate() {
            out[2 * i] = spread(w as u32);
            out[2 * i + 1] = spread((w >> 32) as u32);
        }
        Poly::from_words(&out)
    }

    pub(crate) fn gcd(&self, other: &Poly) -> Poly {
        let (mut a, mut b) = (self.clone(), other.clone());
        while !b.is_zero() {
            let r = a.rem(&b);
            a = b;
            b = r;
        }
        a
    }
}

/// Interleaves zeros between the bits of `v` (squaring over GF(2)).
fn spread(v: u32) -> u64 {
    let mut x = v as u64;
    x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

/// Ben-Or irreducibility test: `f` of degree `l` is irreducible iff
/// `gcd(x^(2^i) − x, f) = 1` for `1 ≤ i ≤ l/2`.
pub(crate) fn is_irreducible(f: &Poly) -> bool {
    let Some(l) = f.degree() else {
        return false;
    };
    if l == 0 {
        return false;
    }
    let mut x = Poly::zero();
    x.flip(1);
    let mut power = x.rem(f);
    for _ in 0..l / 2 {
        power = power.square().rem(f);
        let mut diff = power.clone();
        diff.flip(1);
        if diff.gcd(f).degree() != Some(0) {
            return false;
        }
    }
    true
}

fn search(l: u32) -> Result<Modulus, ExtractorError> {
    if l == 0 || l > MAX_DEGREE {
        return Err(ExtractorError::UnsupportedField(l));
    }
    if l == 1 {
        return Ok(Modulus::new(1, &[0]));
    }
    for k in 1..l {
        let m = Modulus::new(l, &[k, 0]);
        if is_irreducible(&m.to_poly()) {
            return Ok(m);
        }
    }
    for k3 in 3..l {
        for k2 in 2..k3 {
            for k1 in 1..k2 {
                let m = Modulus::new(l, &[k3, k2, k1, 0]);
                if is_irreducible(&m.to_poly()) {
                    return Ok(m);
                }
            }
        }
    }
    Err(ExtractorError::UnsupportedField(l))
}

/// The modulus for `GF(2^l)`, computed once per degree.
pub fn modulus(l: u32) -> Result<Modulus, ExtractorError> {
    static CACHE: OnceLock<Mutex<HashMap<u32, Modulus>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(m) = cache.lock().expect("modulus cache").get(&l) {
        return Ok(*m);
    }
    let m = search(l)?;
    cache.lock().expect("modulus cache").insert(l, m);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Irreducibility by trial division by every polynomial of degree ≤ l/2.
    fn irreducible_by_division(f: u64) -> bool {
        let l = 63 - f.leading_zeros();
        if l == 0 {
            return false;
        }
        let fp = Poly::from_words(&[f]);
        (2u64..1 << (l / 2 + 1)).all(|g| !fp.rem(&Poly::from_words(&[g])).is_zero())
    }

    fn as_word(m: &Modulus) -> u64 {
        m.exponents().iter().fold(0, |acc, e| acc | 1 << e)
    }

    #[test]
    fn ben_or_agrees_with_trial_division() {
        for f in 2u64..1 << 12 {
            let p = Poly::from_words(&[f]);
            assert_eq!(is_irreducible(&p), irreducible_by_division(f), "{f:#b}");
        }
    }

    #[test]
    fn table_matches_independent_search() {
        // Computed separately with big-integer polynomial arithmetic.
        let cases: [(u32, &[u32]); 17] = [
            (2, &[2, 1, 0]),
            (3, &[3, 1, 0]),
            (4, &[4, 1, 0]),
            (5, &[5, 2, 0]),
            (8, &[8, 4, 3, 1, 0]),
            (12, &[12, 3, 0]),
            (13, &[13, 4, 3, 1, 0]),
            (16, &[16, 5, 3, 1, 0]),
            (63, &[63, 1, 0]),
            (64, &[64, 4, 3, 1, 0]),
            (65, &[65, 18, 0]),
            (127, &[127, 1, 0]),
            (128, &[128, 7, 2, 1, 0]),
            (315, &[315, 10, 9, 1, 0]),
            (511, &[511, 10, 0]),
            (512, &[512, 8, 5, 2, 0]),
            (1, &[1, 0]),
        ];
        for (l, exps) in cases {
            assert_eq!(modulus(l).unwrap().exponents(), exps, "l = {l}");
        }
    }

    #[test]
    fn chosen_moduli_are_first_irreducible_candidates() {
        for l in 2..=16u32 {
            let chosen = as_word(&modulus(l).unwrap());
            let mut candidates: Vec<u64> = (1..l).map(|k| (1 << l) | (1 << k) | 1).collect();
            for k3 in 3..l {
                for k2 in 2..k3 {
                    for k1 in 1..k2 {
                        candidates.push((1 << l) | (1 << k3) | (1 << k2) | (1 << k1) | 1);
                    }
                }
            }
            let first = candidates.into_iter().find(|&c| irreducible_by_division(c));
            assert_eq!(first, Some(chosen), "l = {l}");
        }
    }

    #[test]
    fn large_degree_moduli_divide_frobenius() {
        // Necessary condition for irreducibility: x^(2^l) ≡ x mod f.
        for l in [127u32, 128, 315, 511, 512] {
            let f = modulus(l).unwrap().to_poly();
            let mut p = Poly::zero();
            p.flip(1);
            for _ in 0..l {
                p = p.square().rem(&f);
            }
            let mut x = Poly::zero();
            x.flip(1);
            assert_eq!(p, x, "l = {l}");
        }
    }

    #[test]
    fn display_form() {
        assert_eq!(modulus(8).unwrap().to_string(), "x^8 + x^4 + x^3 + x + 1");
        assert!(modulus(0).is_err() && modulus(MAX_DEGREE + 1).is_err());
    }
}
