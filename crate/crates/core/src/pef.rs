//! Probability estimation factors: validation against the adversary model,
//! optimal construction, the power search, and planning quantities.
//!
//! A table `F(cz) ≥ 0` with power `β` is a PEF for the model when
//! `Σ_cz ν_k(z) q(c|z)^{1+β} F(cz) ≤ 1` for every behavior `q` and setting
//! distribution `ν_k` of the model. The constraint is linear in `ν_k` and
//! convex in `q`, so checking the vertices of both polytopes is enough. Dividing
//! by the scaling constant `f_max` turns a PEF into the quantum estimation factor
//! that is accumulated during a run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bell::{BellError, BiasPolytope, ConditionalDistribution, InputDistribution, VertexList};
use nalgebra::{DMatrix, DVector};

use crate::solver::{self, LogProblem, LogTerm, SolverError, SolverOptions};

/// Lower bound imposed on optimized PEF entries.
pub const PEF_FLOOR: f64 = 1e-12;

/// Default power search range and grid.
pub const BETA_RANGE: (f64, f64) = (0.0, 0.05);
pub const BETA_STEP: f64 = 1e-3;
pub const BETA_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone)]
pub enum PefError {
    #[error("invalid PEF table: {0}")]
    InvalidTable(String),
    #[error("no certifiable randomness: expected log-QEF per trial is not positive")]
    NoCertifiableRandomness,
    #[error("invalid power range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("PEF optimization did not converge (relative gap {rel_gap:.3e})")]
    NotConverged { best: Box<PefOptimum>, rel_gap: f64 },
    #[error(transparent)]
    Solver(SolverError),
    #[error(transparent)]
    Bell(#[from] BellError),
}

/// Factors `F(cz)` stored as `[z][c]`, with power and QEF scaling constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PefTable {
    pub f: [[f64; 4]; 4],
    pub beta: f64,
    pub f_max: f64,
}

impl PefTable {
    pub fn new(f: [[f64; 4]; 4], beta: f64, f_max: f64) -> Result<Self, PefError> {
        if f.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PefError::InvalidTable("entries must be finite and non-negative".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(PefError::InvalidTable(format!("beta = {beta} must be positive")));
        }
        if !(f_max >= 1.0 && f_max.is_finite()) {
            return Err(PefError::InvalidTable(format!("f_max = {f_max} must be at least 1")));
        }
        Ok(Self { f, beta, f_max })
    }

    /// The trivial PEF `F ≡ 1`.
    pub fn unit(beta: f64) -> Self {
        Self {
            f: [[1.0; 4]; 4],
            beta,
            f_max: 1.0,
        }
    }

    pub fn get(&self, c: usize, z: usize) -> f64 {
        self.f[z][c]
    }

    pub fn with_f_max(mut self, f_max: f64) -> Self {
        self.f_max = f_max;
        self
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for v in self.f.iter_mut().flatten() {
            *v *= factor;
        }
        self
    }

    /// `log₂ F(cz) − log₂ f_max` for every cell, as `[z][c]`.
    pub fn qef_log2_table(&self) -> [[f64; 4]; 4] {
        let pen = self.f_max.log2();
        self.f.map(|row| row.map(|v| v.log2() - pen))
    }
}

/// `log₂ F(cz) − log₂ f_max`; `−∞` when `F(cz) = 0`.
pub fn qef_log2(pef: &PefTable, c: usize, z: usize) -> f64 {
    pef.get(c, z).log2() - pef.f_max.log2()
}

/// `log₂(2/ε²)`, the smoothing cost in the entropy threshold.
pub fn smoothing_term(eps: f64) -> f64 {
    1.0 - 2.0 * eps.log2()
}

fn constraint_rows(vertices: &VertexList, bias: &BiasPolytope, beta: f64) -> Vec<[f64; 16]> {
    let mut rows: Vec<[f64; 16]> = Vec::with_capacity(vertices.len() * 4);
    for q in vertices.iter() {
        let mut pow = [0.0; 16];
        for z in 0..4 {
            for c in 0..4 {
                pow[4 * z + c] = q.get(c, z).max(0.0).powf(1.0 + beta);
            }
        }
        for nu_k in &bias.vertices {
            let mut row = [0.0; 16];
            for z in 0..4 {
                for c in 0..4 {
                    row[4 * z + c] = nu_k.get(z) * pow[4 * z + c];
                }
            }
            if !rows.contains(&row) {
                rows.push(row);
            }
        }
    }
    rows
}

/// Value of the PEF constraint at behavior `q` and setting distribution `nu_z`.
pub fn pef_constraint_value(pef: &PefTable, q: &ConditionalDistribution, nu_z: &InputDistribution) -> f64 {
    let mut s = 0.0;
    for z in 0..4 {
        for c in 0..4 {
            s += nu_z.get(z) * q.get(c, z).max(0.0).powf(1.0 + pef.beta) * pef.get(c, z);
        }
    }
    s
}

/// Largest constraint value over all model vertices; the PEF is valid iff it is at most 1.
pub fn validate_pef(pef: &PefTable, vertices: &VertexList, bias: &BiasPolytope) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for q in vertices.iter() {
        for nu_k in &bias.vertices {
            best = best.max(pef_constraint_value(pef, q, nu_k));
        }
    }
    best
}

/// `E_ν[log₂ F − log₂ f_max]` for `ν(cz) = input(z)·nu(c|z)`.
pub fn expected_log2(pef: &PefTable, nu: &ConditionalDistribution, input: &InputDistribution) -> f64 {
    let table = pef.qef_log2_table();
    let mut e = 0.0;
    for z in 0..4 {
        for c in 0..4 {
            let w = input.get(z) * nu.get(c, z);
            if w > 0.0 {
                e += w * table[z][c];
            }
        }
    }
    e
}

/// An optimized PEF with its optimality certificate.
#[derive(Debug, Clone)]
pub struct PefOptimum {
    pub pef: PefTable,
    /// `E_ν[log₂ F]` at the returned table.
    pub objective: f64,
    /// Lagrange-dual upper bound on the optimal objective.
    pub upper_bound: f64,
    /// Largest constraint value after renormalization.
    pub constraint_max: f64,
    pub iterations: usize,
}

impl PefOptimum {
    pub fn gap(&self) -> f64 {
        (self.upper_bound - self.objective).max(0.0)
    }

    pub fn relative_gap(&self) -> f64 {
        self.gap() / self.objective.abs().max(1e-300)
    }
}

/// Optimality gap accepted from the PEF optimizer, relative and absolute (bits).
pub const PEF_REL_GAP: f64 = 1e-8;
pub const PEF_ABS_GAP: f64 = 1e-13;

/// Maximizes `E_ν[log₂ F]` over PEFs with power `beta`, with diagnostics.
pub fn optimize_pef_report(
    nu: &ConditionalDistribution,
    input: &InputDistribution,
    beta: f64,
    vertices: &VertexList,
    bias: &BiasPolytope,
) -> Result<PefOptimum, PefError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PefError::InvalidTable(format!("beta = {beta} must be positive")));
    }
    let rows = constraint_rows(vertices, bias, beta);
    let mut weights = [0.0; 16];
    for z in 0..4 {
        for c in 0..4 {
            weights[4 * z + c] = input.get(z) * nu.get(c, z);
        }
    }
    let terms: Vec<LogTerm> = (0..16)
        .filter(|&i| weights[i] > 0.0)
        .map(|i| {
            let mut a = vec![0.0; 16];
            a[i] = 1.0;
            LogTerm {
                w: weights[i],
                a,
                b: 0.0,
            }
        })
        .collect();
    let mut g: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    let mut h = vec![1.0; rows.len()];
    for i in 0..16 {
        let mut r = vec![0.0; 16];
        r[i] = -1.0;
        g.push(r);
        h.push(-PEF_FLOOR);
    }
    let problem = LogProblem { n: 16, terms, g, h };
    let opts = SolverOptions {
        kkt_tol: 1e-13,
        gap_tol: 1e-15,
        max_iter: 150,
    };
    let sol = match solver::solve(&problem, &[0.5; 16], &opts) {
        Ok(s) => s,
        Err(SolverError::NotConverged { best }) => *best,
        Err(e) => return Err(PefError::Solver(e)),
    };

    let lam_ipm = &sol.lambda[..rows.len()];
    let mut best = finish_candidate(&sol.x, lam_ipm, &rows, &weights, beta, nu, input, vertices, bias);
    if let Some(lam) = polish(&rows, &weights, lam_ipm, &sol.slack[..rows.len()]) {
        let x = pef_from_multipliers(&rows, &weights, &lam, &sol.x);
        let cand = finish_candidate(&x, &lam, &rows, &weights, beta, nu, input, vertices, bias);
        // Both dual bounds are valid, so keep the tighter one.
        let upper = best.upper_bound.min(cand.upper_bound);
        if cand.objective > best.objective {
            best = cand;
        }
        best.upper_bound = upper;
    }
    best.iterations = sol.iterations;

    let tol = PEF_REL_GAP * best.objective.abs() + PEF_ABS_GAP;
    if best.gap() > tol {
        return Err(PefError::NotConverged {
            rel_gap: best.relative_gap(),
            best: Box::new(best),
        });
    }
    Ok(best)
}

#[allow(clippy::too_many_arguments)]
fn finish_candidate(
    x: &[f64],
    lam: &[f64],
    rows: &[[f64; 16]],
    weights: &[f64; 16],
    beta: f64,
    nu: &ConditionalDistribution,
    input: &InputDistribution,
    vertices: &VertexList,
    bias: &BiasPolytope,
) -> PefOptimum {
    let mut f = [[0.0; 4]; 4];
    for z in 0..4 {
        for c in 0..4 {
            f[z][c] = x[4 * z + c].max(PEF_FLOOR);
        }
    }
    let raw = PefTable { f, beta, f_max: 1.0 };
    let scale = validate_pef(&raw, vertices, bias);
    let pef = raw.scaled(1.0 / scale);
    PefOptimum {
        pef,
        objective: expected_log2(&pef, nu, input),
        upper_bound: dual_bound(rows, weights, lam),
        constraint_max: validate_pef(&pef, vertices, bias),
        iterations: 0,
    }
}

/// Dual bound for multipliers `λ ≥ 0` on the PEF rows, rescaled optimally:
/// `E* ≤ Σ_i ν_i log₂(ν_i Σλ / (Aᵀλ)_i)`.
fn dual_bound(rows: &[[f64; 16]], weights: &[f64; 16], lam: &[f64]) -> f64 {
    let lam_sum: f64 = lam.iter().map(|l| l.max(0.0)).sum();
    let mut upper = 0.0;
    for i in 0..16 {
        if weights[i] > 0.0 {
            let at: f64 = rows.iter().zip(lam).map(|(r, l)| r[i] * l.max(0.0)).sum();
            if !(at > 0.0) {
                return f64::INFINITY;
            }
            upper += weights[i] * (weights[i] * lam_sum / at).ln();
        }
    }
    upper / std::f64::consts::LN_2
}

/// Stationarity `F_i = ν_i / (Aᵀλ)_i`; cells with zero weight keep `fallback`.
fn pef_from_multipliers(rows: &[[f64; 16]], weights: &[f64; 16], lam: &[f64], fallback: &[f64]) -> Vec<f64> {
    (0..16)
        .map(|i| {
            if weights[i] > 0.0 {
                let at: f64 = rows.iter().zip(lam).map(|(r, l)| r[i] * l).sum();
                weights[i] / at
            } else {
                fallback[i]
            }
        })
        .collect()
}

/// Newton refinement of the interior-point multipliers on the active rows.
///
/// The interior-point iterate stalls at a duality gap near `1e-12`, which is
/// not enough when the optimal value itself is that small. With the active
/// set `J` fixed, the multipliers maximize the concave dual function
/// `φ(λ) = Σ_i ν_i ln (A_Jᵀλ)_i − Σ_j λ_j` over `λ ≥ 0`, a small smooth problem.
/// More rows than cells can be active, so the Newton system is damped.
fn polish(rows: &[[f64; 16]], weights: &[f64; 16], lam: &[f64], slack: &[f64]) -> Option<Vec<f64>> {
    let active: Vec<usize> = (0..rows.len())
        .filter(|&j| lam[j] > slack[j] || slack[j] < 1e-6)
        .collect();
    let k = active.len();
    if k == 0 {
        return None;
    }
    let support: Vec<usize> = (0..16).filter(|&i| weights[i] > 0.0).collect();
    let u_of = |l: &[f64]| -> Option<Vec<f64>> {
        let u: Vec<f64> = support
            .iter()
            .map(|&i| active.iter().zip(l).map(|(&j, lj)| rows[j][i] * lj).sum())
            .collect();
        u.iter().all(|v| *v > 0.0).then_some(u)
    };
    // Gradient of φ, with components that push a zero multiplier negative dropped.
    let grad = |l: &[f64], u: &[f64]| -> DVector<f64> {
        DVector::from_iterator(
            k,
            active.iter().zip(l).map(|(&j, lj)| {
                let g = support
                    .iter()
                    .zip(u)
                    .map(|(&i, ui)| rows[j][i] * weights[i] / ui)
                    .sum::<f64>()
                    - 1.0;
                if *lj <= 0.0 && g < 0.0 { 0.0 } else { g }
            }),
        )
    };
    let phi = |l: &[f64], u: &[f64]| -> f64 {
        support.iter().zip(u).map(|(&i, ui)| weights[i] * ui.ln()).sum::<f64>() - l.iter().sum::<f64>()
    };
    let mut l: Vec<f64> = active.iter().map(|&j| lam[j]).collect();
    let mut u = u_of(&l)?;
    let mut r = grad(&l, &u);
    for _ in 0..50 {
        if r.amax() <= 1e-15 {
            break;
        }
        // Multipliers held at zero by the projection stay out of the step.
        let free: Vec<usize> = (0..k).filter(|&a| l[a] > 0.0 || r[a] > 0.0).collect();
        let kf = free.len();
        let mut hess = DMatrix::from_fn(kf, kf, |a, b| {
            let (ja, jb) = (active[free[a]], active[free[b]]);
            support
                .iter()
                .zip(&u)
                .map(|(&i, ui)| rows[ja][i] * rows[jb][i] * weights[i] / (ui * ui))
                .sum::<f64>()
        });
        let damp = 1e-13 * (hess.trace() / kf as f64) + 1e-300;
        for d in 0..kf {
            hess[(d, d)] += damp;
        }
        let rf = DVector::from_iterator(kf, free.iter().map(|&a| r[a]));
        let sf = hess.cholesky()?.solve(&rf);
        let mut step = vec![0.0; k];
        for (&a, v) in free.iter().zip(sf.iter()) {
            step[a] = *v;
        }
        let phi0 = phi(&l, &u);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let ln: Vec<f64> = l.iter().zip(&step).map(|(a, d)| (a + alpha * d).max(0.0)).collect();
            if let Some(un) = u_of(&ln) {
                let rn = grad(&ln, &un);
                if rn.norm() < r.norm() || phi(&ln, &un) > phi0 {
                    l = ln;
                    u = un;
                    r = rn;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let mut full = vec![0.0; rows.len()];
    for (&j, v) in active.iter().zip(&l) {
        full[j] = *v;
    }
    Some(full)
}

/// The PEF with power `beta` maximizing `E_ν[log₂ F]`.
pub fn optimize_pef(
    nu: &ConditionalDistribution,
    input: &InputDistribution,
    beta: f64,
    vertices: &VertexList,
    bias: &BiasPolytope,
) -> Result<PefTable, PefError> {
    optimize_pef_report(nu, input, beta, vertices, bias).map(|o| o.pef)
}

/// `n_exp = (β·σ + log₂(2/ε_σ²)) / (E_ν[log₂ F] − log₂ f_max)`.
pub fn expected_trials(
    pef: &PefTable,
    nu: &ConditionalDistribution,
    input: &InputDistribution,
    sigma: f64,
    eps_sigma: f64,
) -> Result<f64, PefError> {
    let e = expected_log2(pef, nu, input);
    if !(e > 0.0) {
        return Err(PefError::NoCertifiableRandomness);
    }
    Ok((pef.beta * sigma + smoothing_term(eps_sigma)) / e)
}

/// Bernstein bound on the probability that `n_budget` i.i.d. trials fail to reach
/// `β·σ + log₂(2/ε_σ²)`: `exp(−t²/(2(nV + Mt/3)))` with drift `t = nμ − (βσ + log₂(2/ε_σ²))`,
/// per-trial variance `V` and range `M` of the log-QEF. Returns 1 when `t ≤ 0`.
pub fn failure_probability(
    pef: &PefTable,
    nu: &ConditionalDistribution,
    input: &InputDistribution,
    n_budget: u64,
    sigma: f64,
    eps_sigma: f64,
) -> f64 {
    let table = pef.qef_log2_table();
    let mut mean = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for z in 0..4 {
        for c in 0..4 {
            let w = input.get(z) * nu.get(c, z);
            if w > 0.0 {
                mean += w * table[z][c];
                lo = lo.min(table[z][c]);
                hi = hi.max(table[z][c]);
            }
        }
    }
    if !lo.is_finite() {
        return 1.0;
    }
    let mut var = 0.0;
    for z in 0..4 {
        for c in 0..4 {
            let w = input.get(z) * nu.get(c, z);
            if w > 0.0 {
                var += w * (table[z][c] - mean).powi(2);
            }
        }
    }
    let n = n_budget as f64;
    let t = n * mean - (pef.beta * sigma + smoothing_term(eps_sigma));
    if t <= 0.0 {
        return 1.0;
    }
    let range = hi - lo;
    (-(t * t) / (2.0 * (n * var + range * t / 3.0))).exp().min(1.0)
}

/// Planning quantities for one PEF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningReport {
    /// `E_ν[log₂ F] − log₂ f_max`.
    pub expected_log2_per_trial: f64,
    pub n_exp: f64,
    /// `⌈2·n_exp⌉`.
    pub n_budget: u64,
    pub p_fail_bound: f64,
    /// Expected entropy per trial, `expected_log2_per_trial / β`.
    pub entropy_rate: f64,
}

pub fn plan(
    pef: &PefTable,
    nu: &ConditionalDistribution,
    input: &InputDistribution,
    sigma: f64,
    eps_sigma: f64,
) -> Result<PlanningReport, PefError> {
    let n_exp = expected_trials(pef, nu, input, sigma, eps_sigma)?;
    let n_budget = (2.0 * n_exp).ceil() as u64;
    let e = expected_log2(pef, nu, input);
    Ok(PlanningReport {
        expected_log2_per_trial: e,
        n_exp,
        n_budget,
        p_fail_bound: failure_probability(pef, nu, input, n_budget, sigma, eps_sigma),
        entropy_rate: e / pef.beta,
    })
}

/// Outcome of the power search.
#[derive(Debug, Clone)]
pub struct BetaSearch {
    /// Minimizer of `n_exp` to within [`BETA_TOL`].
    pub beta_star: f64,
    /// `beta_star` rounded to 3 decimals for reporting.
    pub beta_reported: f64,
    pub pef: PefTable,
    pub report: PlanningReport,
    /// `(β, n_exp)` at every grid point with positive drift.
    pub scan: Vec<(f64, f64)>,
}

/// Inputs shared by every PEF solve in a power search.
#[derive(Debug, Clone, Copy)]
pub struct BetaSearchInputs<'a> {
    pub nu: &'a ConditionalDistribution,
    pub input: &'a InputDistribution,
    pub vertices: &'a VertexList,
    pub bias: &'a BiasPolytope,
    pub sigma: f64,
    pub eps_sigma: f64,
    /// Scaling constant applied when evaluating `n_exp`.
    pub f_max: f64,
}

fn n_exp_at(inp: &BetaSearchInputs<'_>, beta: f64) -> Result<(f64, PefTable), PefError> {
    // Near β = 0 nearly every constraint row is tight and the optimum is tiny,
    // so the relative gap can stay above tolerance. The best table is still a
    // valid PEF, and its n_exp is an upper bound on the optimal one.
    let opt = match optimize_pef_report(inp.nu, inp.input, beta, inp.vertices, inp.bias) {
        Ok(o) => o,
        Err(PefError::NotConverged { best, .. }) => *best,
        Err(e) => return Err(e),
    };
    let pef = opt.pef.with_f_max(inp.f_max);
    // Drift indistinguishable from solver noise counts as none.
    if opt.upper_bound - inp.f_max.log2() <= PEF_ABS_GAP {
        return Ok((f64::INFINITY, pef));
    }
    let n = match expected_trials(&pef, inp.nu, inp.input, inp.sigma, inp.eps_sigma) {
        Ok(n) => n,
        Err(PefError::NoCertifiableRandomness) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok((n, pef))
}

/// Finds the power minimizing `n_exp` by a grid scan and golden-section refinement.
pub fn optimize_beta(inp: &BetaSearchInputs<'_>, range: (f64, f64)) -> Result<BetaSearch, PefError> {
    let (lo, hi) = range;
    if !(lo >= 0.0 && hi > lo && hi <= 1.0) {
        return Err(PefError::InvalidRange(lo, hi));
    }
    let mut scan = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let steps = ((hi - lo) / BETA_STEP).round() as usize;
    for j in 1..=steps {
        let beta = lo + j as f64 * BETA_STEP;
        let (n, _) = n_exp_at(inp, beta)?;
        if n.is_finite() {
            scan.push((beta, n));
            if best.is_none_or(|(_, bn)| n < bn) {
                best = Some((beta, n));
            }
        }
    }
    let Some((b0, _)) = best else {
        return Err(PefError::NoCertifiableRandomness);
    };

    let mut a = (b0 - BETA_STEP).max(lo + BETA_TOL);
    let mut b = (b0 + BETA_STEP).min(hi);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = n_exp_at(inp, x1)?.0;
    let mut f2 = n_exp_at(inp, x2)?.0;
    while b - a > BETA_TOL {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = n_exp_at(inp, x1)?.0;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = n_exp_at(inp, x2)?.0;
        }
    }
    let beta_star = 0.5 * (a + b);
    let (_, pef) = n_exp_at(inp, beta_star)?;
    let report = plan(&pef, inp.nu, inp.input, inp.sigma, inp.eps_sigma)?;
    Ok(BetaSearch {
        beta_star,
        beta_reported: (beta_star * 1000.0).round() / 1000.0,
        pef,
        report,
        scan,
    })
}
