//! CHSH trial types, input and conditional distributions, and the polytopes
//! of conditional distributions used to model an adversarial device.
//!
//! Index conventions are fixed throughout the crate: the setting pair `z = xy`
//! has index `x + 2y` (order 00, 10, 01, 11) and the outcome pair `c = ab` has
//! index `a + 2b` (same order). Tables are stored as `[z][c]`, one row per
//! setting pair.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::{BigRational, Ratio};
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Numerator of the rational upper bound used for `2√2`.
pub const TSIRELSON_NUM: i64 = 3_880_899;
/// Denominator of the rational upper bound used for `2√2`.
pub const TSIRELSON_DEN: i64 = 1_372_105;

/// Tolerance for row sums of distributions.
pub const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BellError {
    #[error("trial field {name} = {value} is not a bit")]
    InvalidBit { name: &'static str, value: u8 },
    #[error("invalid trial byte {0:#04x}: high nibble must be zero")]
    InvalidTrialByte(u8),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("eps_b = {0} is outside [0, 0.5]")]
    BiasOutOfRange(f64),
    #[error("polytope is empty")]
    Infeasible,
    #[error("polytope is unbounded")]
    Unbounded,
    #[error("degenerate constraint system: {0}")]
    Degenerate(String),
}

/// Setting-pair index for `(x, y)`.
#[inline]
pub fn z_index(x: u8, y: u8) -> usize {
    (x + 2 * y) as usize
}

/// Outcome-pair index for `(a, b)`.
#[inline]
pub fn c_index(a: u8, b: u8) -> usize {
    (a + 2 * b) as usize
}

/// Inverse of [`z_index`] and [`c_index`]: `(low bit, high bit)`.
#[inline]
pub fn index_bits(i: usize) -> (u8, u8) {
    ((i & 1) as u8, ((i >> 1) & 1) as u8)
}

/// One Bell trial: settings `(x, y)` and outcomes `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialRecord {
    pub x: u8,
    pub y: u8,
    pub a: u8,
    pub b: u8,
}

impl TrialRecord {
    pub fn new(x: u8, y: u8, a: u8, b: u8) -> Result<Self, BellError> {
        for (name, value) in [("x", x), ("y", y), ("a", a), ("b", b)] {
            if value > 1 {
                return Err(BellError::InvalidBit { name, value });
            }
        }
        Ok(Self { x, y, a, b })
    }

    /// Builds a record from an outcome index `c` and a setting index `z`.
    pub fn from_cells(c: usize, z: usize) -> Self {
        let (x, y) = index_bits(z);
        let (a, b) = index_bits(c);
        Self { x, y, a, b }
    }

    #[inline]
    pub fn z(&self) -> usize {
        z_index(self.x, self.y)
    }

    #[inline]
    pub fn c(&self) -> usize {
        c_index(self.a, self.b)
    }

    /// Packs the record as bits `x, y, a, b` in positions 0 to 3.
    #[inline]
    pub fn to_byte(&self) -> u8 {
        self.x | (self.y << 1) | (self.a << 2) | (self.b << 3)
    }

    #[inline]
    pub fn from_byte(byte: u8) -> Result<Self, BellError> {
        if byte & 0xf0 != 0 {
            return Err(BellError::InvalidTrialByte(byte));
        }
        Ok(Self {
            x: byte & 1,
            y: (byte >> 1) & 1,
            a: (byte >> 2) & 1,
            b: (byte >> 3) & 1,
        })
    }
}

/// Distribution of the setting pair, indexed by `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct InputDistribution {
    probs: [f64; 4],
}

impl TryFrom<[f64; 4]> for InputDistribution {
    type Error = BellError;

    fn try_from(probs: [f64; 4]) -> Result<Self, BellError> {
        Self::new(probs)
    }
}

impl From<InputDistribution> for [f64; 4] {
    fn from(d: InputDistribution) -> Self {
        d.probs
    }
}

impl InputDistribution {
    pub fn new(probs: [f64; 4]) -> Result<Self, BellError> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(BellError::InvalidDistribution(format!(
                "negative or non-finite input probability in {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(BellError::InvalidDistribution(format!(
                "input probabilities sum to {sum}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform() -> Self {
        Self { probs: [0.25; 4] }
    }

    pub fn probs(&self) -> &[f64; 4] {
        &self.probs
    }

    pub fn get(&self, z: usize) -> f64 {
        self.probs[z]
    }

    /// Convex combination of input distributions with the given weights.
    pub fn mixture(parts: &[InputDistribution], weights: &[f64]) -> Result<Self, BellError> {
        if parts.len() != weights.len() || parts.is_empty() {
            return Err(BellError::InvalidDistribution(
                "mixture needs one weight per component".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > SUM_TOL {
            return Err(BellError::InvalidDistribution(format!(
                "mixture weights {weights:?} are not a distribution"
            )));
        }
        let mut probs = [0.0; 4];
        for (d, w) in parts.iter().zip(weights) {
            for z in 0..4 {
                probs[z] += w * d.probs[z];
            }
        }
        Self::new(probs)
    }
}

/// Extreme points of the set of setting distributions reachable with bias `eps_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPolytope {
    pub eps_b: f64,
    pub vertices: [InputDistribution; 4],
}

/// The four extreme setting distributions for per-party bias at most `eps_b`.
pub fn bias_vertices(eps_b: f64) -> Result<BiasPolytope, BellError> {
    if !(0.0..=0.5).contains(&eps_b) {
        return Err(BellError::BiasOutOfRange(eps_b));
    }
    let p = 0.5 + eps_b;
    let q = 0.5 - eps_b;
    let (pp, pq, qq) = (p * p, p * q, q * q);
    let vertices = [[pp, pq, pq, qq], [pq, qq, pp, pq], [pq, pp, qq, pq], [qq, pq, pq, pp]]
        .map(|probs| InputDistribution { probs });
    Ok(BiasPolytope { eps_b, vertices })
}

/// Input-conditional outcome distribution `ν(c|z)`, stored as `[z][c]`.
/// Serializes as the bare 4×4 array and is validated when deserialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct ConditionalDistribution {
    probs: [[f64; 4]; 4],
}

impl TryFrom<[[f64; 4]; 4]> for ConditionalDistribution {
    type Error = BellError;

    fn try_from(probs: [[f64; 4]; 4]) -> Result<Self, BellError> {
        Self::new(probs)
    }
}

impl From<ConditionalDistribution> for [[f64; 4]; 4] {
    fn from(d: ConditionalDistribution) -> Self {
        d.probs
    }
}

impl ConditionalDistribution {
    pub fn new(probs: [[f64; 4]; 4]) -> Result<Self, BellError> {
        for (z, row) in probs.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(BellError::InvalidDistribution(format!(
                    "negative or non-finite entry in row z={z}: {row:?}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(BellError::InvalidDistribution(format!("row z={z} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    /// Clamps tiny negative entries to zero and renormalizes each row.
    pub fn from_approx(mut probs: [[f64; 4]; 4]) -> Result<Self, BellError> {
        for row in probs.iter_mut() {
            for p in row.iter_mut() {
                if *p < 0.0 {
                    *p = 0.0;
                }
            }
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 || !sum.is_finite() {
                return Err(BellError::InvalidDistribution("row sums to zero".into()));
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Self::new(probs)
    }

    pub fn uniform() -> Self {
        Self { probs: [[0.25; 4]; 4] }
    }

    /// Local deterministic behavior: `a = alice[x]`, `b = bob[y]`.
    pub fn deterministic(alice: [u8; 2], bob: [u8; 2]) -> Self {
        let mut probs = [[0.0; 4]; 4];
        for (z, row) in probs.iter_mut().enumerate() {
            let (x, y) = index_bits(z);
            row[c_index(alice[x as usize] & 1, bob[y as usize] & 1)] = 1.0;
        }
        Self { probs }
    }

    /// The 16 local deterministic behaviors.
    pub fn all_deterministic() -> Vec<Self> {
        (0..16u8)
            .map(|k| Self::deterministic([k & 1, (k >> 1) & 1], [(k >> 2) & 1, (k >> 3) & 1]))
            .collect()
    }

    /// Popescu–Rohrlich box with `a ⊕ b = xy`, uniform marginals.
    pub fn pr_box() -> Self {
        let mut probs = [[0.0; 4]; 4];
        for (z, row) in probs.iter_mut().enumerate() {
            let (x, y) = index_bits(z);
            for (c, p) in row.iter_mut().enumerate() {
                let (a, b) = index_bits(c);
                if a ^ b == x & y {
                    *p = 0.5;
                }
            }
        }
        Self { probs }
    }

    pub fn probs(&self) -> &[[f64; 4]; 4] {
        &self.probs
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize) -> f64 {
        self.probs[z][c]
    }

    /// Joint distribution `input(z)·ν(c|z)` as `[z][c]`.
    pub fn joint(&self, input: &InputDistribution) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for z in 0..4 {
            for c in 0..4 {
                out[z][c] = input.get(z) * self.probs[z][c];
            }
        }
        out
    }

    /// `λ·self + (1-λ)·other`.
    pub fn mix(&self, other: &Self, lambda: f64) -> Self {
        let mut probs = [[0.0; 4]; 4];
        for z in 0..4 {
            for c in 0..4 {
                probs[z][c] = lambda * self.probs[z][c] + (1.0 - lambda) * other.probs[z][c];
            }
        }
        Self { probs }
    }

    pub fn flat(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for z in 0..4 {
            for c in 0..4 {
                out[4 * z + c] = self.probs[z][c];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for z in 0..4 {
            for c in 0..4 {
                m = m.max((self.probs[z][c] - other.probs[z][c]).abs());
            }
        }
        m
    }
}

/// Correlator `E_xy = Σ_ab (-1)^{a⊕b} ν(ab|xy)` for each `z`.
pub fn correlators(nu: &ConditionalDistribution) -> [f64; 4] {
    let mut e = [0.0; 4];
    for (z, ez) in e.iter_mut().enumerate() {
        for c in 0..4 {
            let (a, b) = index_bits(c);
            let sign = if a ^ b == 0 { 1.0 } else { -1.0 };
            *ez += sign * nu.get(c, z);
        }
    }
    e
}

/// `Î = E₀₀ + E₀₁ + E₁₀ − E₁₁`.
pub fn chsh_value(nu: &ConditionalDistribution) -> f64 {
    let e = correlators(nu);
    e[0] + e[1] + e[2] - e[3]
}

/// Sign pattern of the CHSH variant `(α, β, γ)` for setting index `z`.
fn chsh_sign(alpha: u8, beta: u8, gamma: u8, z: usize) -> i64 {
    let (x, y) = index_bits(z);
    if ((x & y) ^ (alpha & x) ^ (beta & y) ^ gamma) == 0 {
        1
    } else {
        -1
    }
}

/// Values of all 8 CHSH variants, ordered by `α + 2β + 4γ`.
pub fn chsh_variants(nu: &ConditionalDistribution) -> [f64; 8] {
    let e = correlators(nu);
    let mut out = [0.0; 8];
    for (v, o) in out.iter_mut().enumerate() {
        let (alpha, beta, gamma) = ((v & 1) as u8, ((v >> 1) & 1) as u8, ((v >> 2) & 1) as u8);
        *o = (0..4).map(|z| chsh_sign(alpha, beta, gamma, z) as f64 * e[z]).sum();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `coeffs·p ≤ rhs`
    Le,
    /// `coeffs·p = rhs`
    Eq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintLabel {
    Normalization { z: usize },
    NonNegative { c: usize, z: usize },
    NoSignalAlice { x: u8 },
    NoSignalBob { y: u8 },
    Chsh { alpha: u8, beta: u8, gamma: u8 },
}

/// One linear constraint over the 16 probabilities, flat index `4z + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: [i64; 16],
    pub rhs: Ratio<i64>,
    pub kind: ConstraintKind,
    pub label: ConstraintLabel,
}

impl Constraint {
    pub fn lhs(&self, p: &[f64; 16]) -> f64 {
        self.coeffs.iter().zip(p).map(|(a, x)| *a as f64 * x).sum()
    }

    pub fn rhs_f64(&self) -> f64 {
        *self.rhs.numer() as f64 / *self.rhs.denom() as f64
    }

    /// Amount by which `p` violates the constraint (0 when satisfied).
    pub fn violation(&self, p: &[f64; 16]) -> f64 {
        let d = self.lhs(p) - self.rhs_f64();
        match self.kind {
            ConstraintKind::Le => d.max(0.0),
            ConstraintKind::Eq => d.abs(),
        }
    }
}

/// H-representation of a polytope of conditional distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeH {
    pub constraints: Vec<Constraint>,
}

impl PolytopeH {
    /// Normalization per setting and non-negativity.
    pub fn normalized() -> Self {
        let mut constraints = Vec::new();
        for z in 0..4 {
            let mut coeffs = [0; 16];
            for c in 0..4 {
                coeffs[4 * z + c] = 1;
            }
            constraints.push(Constraint {
                coeffs,
                rhs: Ratio::from_integer(1),
                kind: ConstraintKind::Eq,
                label: ConstraintLabel::Normalization { z },
            });
        }
        for z in 0..4 {
            for c in 0..4 {
                let mut coeffs = [0; 16];
                coeffs[4 * z + c] = -1;
                constraints.push(Constraint {
                    coeffs,
                    rhs: Ratio::from_integer(0),
                    kind: ConstraintKind::Le,
                    label: ConstraintLabel::NonNegative { c, z },
                });
            }
        }
        Self { constraints }
    }

    /// Normalization, non-negativity and the non-signaling equalities.
    pub fn non_signaling() -> Self {
        let mut h = Self::normalized();
        // p(a=0|x,y=0) = p(a=0|x,y=1)
        for x in 0..2u8 {
            let mut coeffs = [0; 16];
            for b in 0..2u8 {
                coeffs[4 * z_index(x, 0) + c_index(0, b)] += 1;
                coeffs[4 * z_index(x, 1) + c_index(0, b)] -= 1;
            }
            h.constraints.push(Constraint {
                coeffs,
                rhs: Ratio::from_integer(0),
                kind: ConstraintKind::Eq,
                label: ConstraintLabel::NoSignalAlice { x },
            });
        }
        // p(b=0|x=0,y) = p(b=0|x=1,y)
        for y in 0..2u8 {
            let mut coeffs = [0; 16];
            for a in 0..2u8 {
                coeffs[4 * z_index(0, y) + c_index(a, 0)] += 1;
                coeffs[4 * z_index(1, y) + c_index(a, 0)] -= 1;
            }
            h.constraints.push(Constraint {
                coeffs,
                rhs: Ratio::from_integer(0),
                kind: ConstraintKind::Eq,
                label: ConstraintLabel::NoSignalBob { y },
            });
        }
        h
    }

    /// Adds the 8 CHSH variants bounded by `bound`.
    pub fn with_chsh_bound(mut self, bound: Ratio<i64>) -> Self {
        for v in 0..8u8 {
            let (alpha, beta, gamma) = (v & 1, (v >> 1) & 1, (v >> 2) & 1);
            let mut coeffs = [0; 16];
            for z in 0..4 {
                let s = chsh_sign(alpha, beta, gamma, z);
                for c in 0..4 {
                    let (a, b) = index_bits(c);
                    let e = if a ^ b == 0 { 1 } else { -1 };
                    coeffs[4 * z + c] = s * e;
                }
            }
            self.constraints.push(Constraint {
                coeffs,
                rhs: bound,
                kind: ConstraintKind::Le,
                label: ConstraintLabel::Chsh { alpha, beta, gamma },
            });
        }
        self
    }

    /// Non-signaling polytope, optionally cut by the Tsirelson bounds.
    pub fn tsirelson() -> Self {
        Self::non_signaling().with_chsh_bound(Ratio::new(TSIRELSON_NUM, TSIRELSON_DEN))
    }

    /// Local polytope: non-signaling with all CHSH variants at most 2.
    pub fn local() -> Self {
        Self::non_signaling().with_chsh_bound(Ratio::from_integer(2))
    }

    pub fn equalities(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.iter().filter(|c| c.kind == ConstraintKind::Eq)
    }

    pub fn inequalities(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.iter().filter(|c| c.kind == ConstraintKind::Le)
    }

    /// Constraints violated by more than `tol`.
    pub fn violated(&self, nu: &ConditionalDistribution, tol: f64) -> Vec<&Constraint> {
        let p = nu.flat();
        self.constraints.iter().filter(|c| c.violation(&p) > tol).collect()
    }

    /// Exact parameterization of the affine hull of the equalities.
    pub fn affine_form_exact(&self) -> Result<ExactAffineForm, BellError> {
        ExactAffineForm::new(self)
    }

    /// Floating-point parameterization, `p = x0 + B t` with inequalities `G t ≤ h`.
    pub fn affine_form(&self) -> Result<AffineForm, BellError> {
        Ok(self.affine_form_exact()?.to_f64())
    }
}

/// Builds the conditional polytope: non-signaling, plus the Tsirelson bounds if requested.
pub fn build_polytope(tsirelson: bool) -> PolytopeH {
    if tsirelson {
        PolytopeH::tsirelson()
    } else {
        PolytopeH::non_signaling()
    }
}

/// True iff every constraint of `h` holds within `tol`.
pub fn contains(h: &PolytopeH, nu: &ConditionalDistribution, tol: f64) -> bool {
    let p = nu.flat();
    h.constraints.iter().all(|c| c.violation(&p) <= tol)
}

fn rat(r: &Ratio<i64>) -> BigRational {
    BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom()))
}

fn rat_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// `p = x0 + Σ_j t_j basis_j` restricted by `g_i·t ≤ h_i`, in exact arithmetic.
#[derive(Debug, Clone)]
pub struct ExactAffineForm {
    pub x0: Vec<BigRational>,
    /// One column of length 16 per free parameter.
    pub basis: Vec<Vec<BigRational>>,
    /// Flat indices of the probabilities used as free parameters.
    pub free: Vec<usize>,
    pub g: Vec<Vec<BigRational>>,
    pub h: Vec<BigRational>,
}

impl ExactAffineForm {
    fn new(poly: &PolytopeH) -> Result<Self, BellError> {
        // Reduced row echelon form of [A | b] for the equalities.
        let mut rows: Vec<Vec<BigRational>> = poly
            .equalities()
            .map(|c| {
                let mut r: Vec<BigRational> = c
                    .coeffs
                    .iter()
                    .map(|a| BigRational::from_integer(BigInt::from(*a)))
                    .collect();
                r.push(rat(&c.rhs));
                r
            })
            .collect();
        let mut pivots = Vec::new();
        let mut row = 0;
        for col in 0..16 {
            let Some(pr) = (row..rows.len()).find(|&r| !rows[r][col].is_zero()) else {
                continue;
            };
            rows.swap(row, pr);
            let inv = rows[row][col].recip();
            for v in rows[row].iter_mut() {
                *v *= &inv;
            }
            for r in 0..rows.len() {
                if r != row && !rows[r][col].is_zero() {
                    let f = rows[r][col].clone();
                    for k in 0..17 {
                        let delta = &f * &rows[row][k];
                        rows[r][k] -= delta;
                    }
                }
            }
            pivots.push(col);
            row += 1;
        }
        for r in &rows[row..] {
            if !r[16].is_zero() {
                return Err(BellError::Infeasible);
            }
        }
        let free: Vec<usize> = (0..16).filter(|c| !pivots.contains(c)).collect();
        let mut x0 = vec![BigRational::zero(); 16];
        let mut basis = vec![vec![BigRational::zero(); 16]; free.len()];
        for (r, &pc) in pivots.iter().enumerate() {
            x0[pc] = rows[r][16].clone();
            for (j, &fc) in free.iter().enumerate() {
                basis[j][pc] = -rows[r][fc].clone();
            }
        }
        for (j, &fc) in free.iter().enumerate() {
            basis[j][fc] = BigRational::one();
        }
        let mut g = Vec::new();
        let mut h = Vec::new();
        for c in poly.inequalities() {
            let coeffs: Vec<BigRational> = c
                .coeffs
                .iter()
                .map(|a| BigRational::from_integer(BigInt::from(*a)))
                .collect();
            let dot0: BigRational = coeffs.iter().zip(&x0).map(|(a, x)| a * x).sum();
            let gi: Vec<BigRational> = basis
                .iter()
                .map(|col| coeffs.iter().zip(col).map(|(a, x)| a * x).sum())
                .collect();
            g.push(gi);
            h.push(rat(&c.rhs) - dot0);
        }
        Ok(Self { x0, basis, free, g, h })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn point(&self, t: &[BigRational]) -> Vec<BigRational> {
        let mut p = self.x0.clone();
        for (tj, col) in t.iter().zip(&self.basis) {
            for (pi, bi) in p.iter_mut().zip(col) {
                *pi += tj * bi;
            }
        }
        p
    }

    pub fn to_f64(&self) -> AffineForm {
        AffineForm {
            x0: self.x0.iter().map(rat_to_f64).collect(),
            basis: self.basis.iter().map(|c| c.iter().map(rat_to_f64).collect()).collect(),
            free: self.free.clone(),
            g: self.g.iter().map(|r| r.iter().map(rat_to_f64).collect()).collect(),
            h: self.h.iter().map(rat_to_f64).collect(),
        }
    }
}

/// Floating-point counterpart of [`ExactAffineForm`].
#[derive(Debug, Clone)]
pub struct AffineForm {
    pub x0: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub free: Vec<usize>,
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

impl AffineForm {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Flat probability vector for parameters `t`.
    pub fn point(&self, t: &[f64]) -> [f64; 16] {
        let mut p = [0.0; 16];
        p.copy_from_slice(&self.x0);
        for (tj, col) in t.iter().zip(&self.basis) {
            for (pi, bi) in p.iter_mut().zip(col) {
                *pi += tj * bi;
            }
        }
        p
    }

    /// Parameters of a point lying in the affine hull.
    pub fn params_of(&self, p: &[f64; 16]) -> Vec<f64> {
        self.free.iter().map(|&i| p[i]).collect()
    }

    /// Row of the linear map `t ↦ p[i]`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.basis.iter().map(|col| col[i]).collect()
    }
}

/// Extreme points of a polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexList {
    pub vertices: Vec<ConditionalDistribution>,
    pub dedup_tol: f64,
}

impl VertexList {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ConditionalDistribution> {
        self.vertices.iter()
    }
}

/// Dedup tolerance for vertex lists, in max-norm.
pub const VERTEX_DEDUP_TOL: f64 = 1e-9;

struct Ray {
    v: Vec<BigInt>,
    tight: u128,
}

fn normalize_ray(v: &mut [BigInt]) {
    let mut g = BigInt::zero();
    for x in v.iter() {
        g = g.gcd(x);
    }
    if !g.is_zero() && !g.is_one() {
        for x in v.iter_mut() {
            *x /= &g;
        }
    }
}

fn dot(a: &[BigInt], b: &[BigInt]) -> BigInt {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lists all extreme points of `h` with the double-description method in exact arithmetic.
pub fn enumerate_vertices(h: &PolytopeH) -> Result<VertexList, BellError> {
    let af = h.affine_form_exact()?;
    let d = af.dim();
    // Homogenized cone {(s, t): s·h_i − g_i·t ≥ 0, s ≥ 0}, rows scaled to integers.
    let mut rows: Vec<Vec<BigInt>> = Vec::with_capacity(af.g.len() + 1);
    let mut s_row = vec![BigInt::zero(); d + 1];
    s_row[0] = BigInt::one();
    rows.push(s_row);
    for (gi, hi) in af.g.iter().zip(&af.h) {
        let mut lcm = hi.denom().clone();
        for x in gi {
            lcm = lcm.lcm(x.denom());
        }
        let scale = BigRational::from_integer(lcm);
        let mut r = Vec::with_capacity(d + 1);
        r.push((hi * &scale).to_integer());
        for x in gi {
            r.push((-(x * &scale)).to_integer());
        }
        normalize_ray(&mut r);
        rows.push(r);
    }
    if rows.len() > 128 {
        return Err(BellError::Degenerate(format!(
            "{} constraints exceed the 128 supported by the enumerator",
            rows.len()
        )));
    }

    // Initial simplicial cone from d+1 linearly independent rows.
    let mut basis_rows: Vec<usize> = Vec::new();
    let mut echelon: Vec<Vec<BigRational>> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let mut v: Vec<BigRational> = r.iter().map(|x| BigRational::from_integer(x.clone())).collect();
        for e in &echelon {
            let lead = e.iter().position(|x| !x.is_zero()).unwrap();
            if !v[lead].is_zero() {
                let f = &v[lead] / &e[lead];
                for k in 0..=d {
                    let delta = &f * &e[k];
                    v[k] -= delta;
                }
            }
        }
        if v.iter().any(|x| !x.is_zero()) {
            echelon.push(v);
            basis_rows.push(i);
            if basis_rows.len() == d + 1 {
                break;
            }
        }
    }
    if basis_rows.len() < d + 1 {
        return Err(BellError::Unbounded);
    }
    let inv = invert(&basis_rows.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())
        .ok_or_else(|| BellError::Degenerate("singular initial basis".into()))?;
    let mut processed: u128 = 0;
    for &i in &basis_rows {
        processed |= 1u128 << i;
    }
    let mut rays: Vec<Ray> = (0..=d)
        .map(|j| {
            let mut lcm = BigInt::one();
            for row in &inv {
                lcm = lcm.lcm(row[j].denom());
            }
            let scale = BigRational::from_integer(lcm);
            let mut v: Vec<BigInt> = inv.iter().map(|row| (&row[j] * &scale).to_integer()).collect();
            normalize_ray(&mut v);
            let mut tight = 0u128;
            for (k, &i) in basis_rows.iter().enumerate() {
                if k != j {
                    tight |= 1u128 << i;
                }
            }
            Ray { v, tight }
        })
        .collect();

    for (i, row) in rows.iter().enumerate() {
        if processed & (1u128 << i) != 0 {
            continue;
        }
        let bit = 1u128 << i;
        let vals: Vec<BigInt> = rays.iter().map(|r| dot(row, &r.v)).collect();
        let pos: Vec<usize> = (0..rays.len()).filter(|&k| vals[k].is_positive()).collect();
        let neg: Vec<usize> = (0..rays.len()).filter(|&k| vals[k].is_negative()).collect();
        let mut next: Vec<Ray> = Vec::with_capacity(rays.len() + pos.len() * neg.len());
        for &p in &pos {
            for &n in &neg {
                let common = rays[p].tight & rays[n].tight;
                if (common.count_ones() as usize) + 1 < d {
                    continue;
                }
                let adjacent = (0..rays.len()).all(|k| k == p || k == n || rays[k].tight & common != common);
                if !adjacent {
                    continue;
                }
                let mut v: Vec<BigInt> = rays[n]
                    .v
                    .iter()
                    .zip(&rays[p].v)
                    .map(|(xn, xp)| &vals[p] * xn - &vals[n] * xp)
                    .collect();
                normalize_ray(&mut v);
                next.push(Ray { v, tight: common | bit });
            }
        }
        for (k, r) in rays.into_iter().enumerate() {
            if vals[k].is_positive() {
                next.push(r);
            } else if vals[k].is_zero() {
                next.push(Ray {
                    v: r.v,
                    tight: r.tight | bit,
                });
            }
        }
        if next.is_empty() {
            return Err(BellError::Infeasible);
        }
        rays = next;
        processed |= bit;
    }

    let mut vertices = Vec::with_capacity(rays.len());
    for r in &rays {
        if !r.v[0].is_positive() {
            return Err(BellError::Unbounded);
        }
        let s = BigRational::from_integer(r.v[0].clone());
        let t: Vec<BigRational> = r.v[1..]
            .iter()
            .map(|x| BigRational::from_integer(x.clone()) / &s)
            .collect();
        let p = af.point(&t);
        let mut probs = [[0.0; 4]; 4];
        for z in 0..4 {
            for c in 0..4 {
                probs[z][c] = rat_to_f64(&p[4 * z + c]);
            }
        }
        let nu = ConditionalDistribution::from_approx(probs)?;
        vertices.push(nu);
    }
    vertices.sort_by(|a, b| a.flat().partial_cmp(&b.flat()).unwrap());
    for w in vertices.windows(2) {
        if w[0].max_abs_diff(&w[1]) <= VERTEX_DEDUP_TOL {
            return Err(BellError::Degenerate(
                "two extreme points coincide within the dedup tolerance".into(),
            ));
        }
    }
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            if a.max_abs_diff(b) <= VERTEX_DEDUP_TOL {
                return Err(BellError::Degenerate(
                    "two extreme points coincide within the dedup tolerance".into(),
                ));
            }
        }
    }
    Ok(VertexList {
        vertices,
        dedup_tol: VERTEX_DEDUP_TOL,
    })
}

fn invert(m: &[Vec<BigInt>]) -> Option<Vec<Vec<BigRational>>> {
    let n = m.len();
    let mut a: Vec<Vec<BigRational>> = m
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row: Vec<BigRational> = r.iter().map(|x| BigRational::from_integer(x.clone())).collect();
            row.extend((0..n).map(|j| {
                if i == j {
                    BigRational::one()
                } else {
                    BigRational::zero()
                }
            }));
            row
        })
        .collect();
    for col in 0..n {
        let pr = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pr);
        let inv = a[col][col].recip();
        for v in a[col].iter_mut() {
            *v *= &inv;
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for k in 0..2 * n {
                    let delta = &f * &a[col][k];
                    a[r][k] -= delta;
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[n..].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_byte_roundtrip() {
        for byte in 0..16u8 {
            let t = TrialRecord::from_byte(byte).unwrap();
            assert_eq!(t.to_byte(), byte);
            assert_eq!(TrialRecord::from_cells(t.c(), t.z()), t);
        }
        assert!(TrialRecord::from_byte(0x10).is_err());
        assert!(TrialRecord::new(2, 0, 0, 0).is_err());
    }

    #[test]
    fn bias_vertices_examples() {
        let b = bias_vertices(0.0).unwrap();
        for v in &b.vertices {
            assert_eq!(v.probs(), &[0.25; 4]);
        }
        let b = bias_vertices(1e-3).unwrap();
        let first = b.vertices[0].probs();
        let expect = [0.251001, 0.249999, 0.249999, 0.249001];
        for (a, e) in first.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        let b = bias_vertices(0.5).unwrap();
        let mut deterministic: Vec<usize> = b
            .vertices
            .iter()
            .map(|v| v.probs().iter().position(|p| *p == 1.0).unwrap())
            .collect();
        deterministic.sort();
        assert_eq!(deterministic, vec![0, 1, 2, 3]);
        assert!(bias_vertices(0.6).is_err());
        assert!(bias_vertices(-1e-9).is_err());
    }

    #[test]
    fn chsh_examples() {
        assert_eq!(chsh_value(&ConditionalDistribution::uniform()), 0.0);
        assert_eq!(chsh_value(&ConditionalDistribution::deterministic([0, 0], [0, 0])), 2.0);
        assert_eq!(chsh_value(&ConditionalDistribution::pr_box()), 4.0);
        for d in ConditionalDistribution::all_deterministic() {
            for v in chsh_variants(&d) {
                assert!(v.abs() == 2.0);
            }
        }
    }

    #[test]
    fn tsirelson_constant_is_a_tight_upper_bound() {
        // p² − 8q² = 1 makes p/q > 2√2; the gap is below 1e-12.
        let p = TSIRELSON_NUM as i128;
        let q = TSIRELSON_DEN as i128;
        assert_eq!(p * p - 8 * q * q, 1);
        let gap = TSIRELSON_NUM as f64 / TSIRELSON_DEN as f64 - 2.0 * 2f64.sqrt();
        assert!(gap > -1e-15 && gap < 1e-12);
    }

    #[test]
    fn polytope_membership_examples() {
        let off = build_polytope(false);
        let on = build_polytope(true);
        let u = ConditionalDistribution::uniform();
        assert!(contains(&off, &u, 0.0));
        assert!(contains(&on, &u, 0.0));
        let pr = ConditionalDistribution::pr_box();
        assert!(contains(&off, &pr, 1e-9));
        assert!(!contains(&on, &pr, 1e-9));
        let violated = on.violated(&pr, 1e-9);
        assert_eq!(violated.len(), 1);
        assert!(matches!(violated[0].label, ConstraintLabel::Chsh { .. }));
        for d in ConditionalDistribution::all_deterministic() {
            assert!(contains(&on, &d, 0.0));
        }
    }

    #[test]
    fn affine_form_reproduces_points() {
        let af = PolytopeH::tsirelson().affine_form().unwrap();
        assert_eq!(af.dim(), 8);
        for d in ConditionalDistribution::all_deterministic() {
            let p = d.flat();
            let back = af.point(&af.params_of(&p));
            for (a, b) in p.iter().zip(back) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert_eq!(PolytopeH::normalized().affine_form().unwrap().dim(), 12);
    }

    #[test]
    fn vertex_counts() {
        assert_eq!(enumerate_vertices(&PolytopeH::normalized()).unwrap().len(), 256);
        let ns = enumerate_vertices(&PolytopeH::non_signaling()).unwrap();
        assert_eq!(ns.len(), 24);
        let local = enumerate_vertices(&PolytopeH::local()).unwrap();
        assert_eq!(local.len(), 16);
        let ts = enumerate_vertices(&PolytopeH::tsirelson()).unwrap();
        assert_eq!(ts.len(), 80);
    }
}
