//! Maximum-likelihood calibration of the device behavior and the statistical
//! strength of a behavior against local realistic models.

use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::bell::{AffineForm, BellError, ConditionalDistribution, InputDistribution, PolytopeH, TrialRecord};
use crate::solver::{self, LogProblem, LogTerm, SolverError, SolverOptions};

/// Trial counts `n_cz`, stored as `[z][c]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountTable {
    pub counts: [[u64; 4]; 4],
}

impl CountTable {
    pub fn new(counts: [[u64; 4]; 4]) -> Self {
        Self { counts }
    }

    pub fn get(&self, c: usize, z: usize) -> u64 {
        self.counts[z][c]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn setting_totals(&self) -> [u64; 4] {
        self.counts.map(|row| row.iter().sum())
    }

    pub fn record(&mut self, t: &TrialRecord) {
        self.counts[t.z()][t.c()] += 1;
    }

    pub fn merge(&mut self, other: &CountTable) {
        for z in 0..4 {
            for c in 0..4 {
                self.counts[z][c] += other.counts[z][c];
            }
        }
    }

    /// Relative frequencies per setting.
    pub fn frequencies(&self) -> Option<ConditionalDistribution> {
        let mut probs = [[0.0; 4]; 4];
        for (z, row) in self.counts.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n == 0 {
                return None;
            }
            for c in 0..4 {
                probs[z][c] = row[c] as f64 / n as f64;
            }
        }
        ConditionalDistribution::from_approx(probs).ok()
    }
}

#[derive(Debug, Error, Clone)]
pub enum CalibrationError {
    #[error("no calibration trials with setting index z={0}")]
    EmptySetting(usize),
    #[error(transparent)]
    Bell(#[from] BellError),
    #[error("solver did not converge (gap {gap:.3e}, kkt residual {kkt_residual:.3e})")]
    NotConverged {
        best: Box<ConditionalDistribution>,
        gap: f64,
        kkt_residual: f64,
    },
    #[error(transparent)]
    Solver(SolverError),
}

/// Result of a maximum-likelihood fit with solver diagnostics.
#[derive(Debug, Clone)]
pub struct MleFit {
    pub nu: ConditionalDistribution,
    /// `Σ_cz n_cz ln μ(c|z)` divided by the total count.
    pub mean_log_likelihood: f64,
    pub kkt_residual: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// KKT residual required of calibration fits.
pub const MLE_KKT_TOL: f64 = 1e-9;

/// Mean log-likelihood `Σ_cz n_cz ln μ(c|z) / N`; zero cells contribute nothing.
pub fn mean_log_likelihood(counts: &CountTable, mu: &ConditionalDistribution) -> f64 {
    let total = counts.total() as f64;
    let mut ll = 0.0;
    for z in 0..4 {
        for c in 0..4 {
            let n = counts.get(c, z);
            if n > 0 {
                ll += n as f64 * mu.get(c, z).ln();
            }
        }
    }
    ll / total
}

/// Minimizes `−Σ_i w_i ln p_i` over the polytope described by `af`.
fn fit_weights(
    af: &AffineForm,
    weights: &[f64; 16],
) -> Result<(ConditionalDistribution, solver::Solution), CalibrationError> {
    let terms: Vec<LogTerm> = (0..16)
        .filter(|&i| weights[i] > 0.0)
        .map(|i| LogTerm {
            w: weights[i],
            a: af.row(i),
            b: af.x0[i],
        })
        .collect();
    let problem = LogProblem {
        n: af.dim(),
        terms,
        g: af.g.clone(),
        h: af.h.clone(),
    };
    let start = af.params_of(&ConditionalDistribution::uniform().flat());
    let opts = SolverOptions {
        kkt_tol: 1e-12,
        gap_tol: 1e-14,
        max_iter: 200,
    };
    let to_dist = |x: &[f64]| -> Result<ConditionalDistribution, BellError> {
        let p = af.point(x);
        let mut probs = [[0.0; 4]; 4];
        for z in 0..4 {
            for c in 0..4 {
                probs[z][c] = p[4 * z + c];
            }
        }
        ConditionalDistribution::from_approx(probs)
    };
    match solver::solve_relaxed(&problem, &start, &opts, MLE_KKT_TOL, 1e-10) {
        Ok(sol) => Ok((to_dist(&sol.x)?, sol)),
        Err(SolverError::NotConverged { best }) => Err(CalibrationError::NotConverged {
            best: Box::new(to_dist(&best.x)?),
            gap: best.gap,
            kkt_residual: best.kkt_residual,
        }),
        Err(e) => Err(CalibrationError::Solver(e)),
    }
}

/// Maximum-likelihood behavior in `h` with diagnostics.
pub fn fit_max_likelihood(counts: &CountTable, h: &PolytopeH) -> Result<MleFit, CalibrationError> {
    for (z, n) in counts.setting_totals().iter().enumerate() {
        if *n == 0 {
            return Err(CalibrationError::EmptySetting(z));
        }
    }
    let af = h.affine_form()?;
    let total = counts.total() as f64;
    let mut weights = [0.0; 16];
    for z in 0..4 {
        for c in 0..4 {
            weights[4 * z + c] = counts.get(c, z) as f64 / total;
        }
    }
    let (nu, sol) = fit_weights(&af, &weights)?;
    Ok(MleFit {
        mean_log_likelihood: mean_log_likelihood(counts, &nu),
        nu,
        kkt_residual: sol.kkt_residual,
        gap: sol.gap,
        iterations: sol.iterations,
    })
}

/// Maximizer of `Σ_cz n_cz log μ(c|z)` over `h`.
pub fn max_likelihood(counts: &CountTable, h: &PolytopeH) -> Result<ConditionalDistribution, CalibrationError> {
    fit_max_likelihood(counts, h).map(|f| f.nu)
}

fn local_form() -> &'static AffineForm {
    static FORM: OnceLock<AffineForm> = OnceLock::new();
    FORM.get_or_init(|| {
        PolytopeH::local()
            .affine_form()
            .expect("local polytope has a valid affine form")
    })
}

/// Minimum KL divergence, in bits per trial, of `input(z)·ν(c|z)` from the
/// local realistic distributions with the same setting distribution.
pub fn statistical_strength(nu: &ConditionalDistribution, input: &InputDistribution) -> Result<f64, CalibrationError> {
    let mut weights = [0.0; 16];
    for z in 0..4 {
        for c in 0..4 {
            weights[4 * z + c] = input.get(z) * nu.get(c, z);
        }
    }
    let (lambda, _) = fit_weights(local_form(), &weights)?;
    let mut kl = 0.0;
    for z in 0..4 {
        for c in 0..4 {
            let w = weights[4 * z + c];
            if w > 0.0 {
                kl += w * (nu.get(c, z) / lambda.get(c, z)).log2();
            }
        }
    }
    Ok(kl.max(0.0))
}
