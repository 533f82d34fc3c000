//! Trial counts required by entropy accumulation with CHSH-based
//! min-tradeoff functions, for comparison with the PEF protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EatError {
    #[error("winning probability {0} outside [3/4, 1]")]
    OutOfDomain(f64),
    #[error("EAT rate zero: no CHSH violation, so no finite n")]
    NoViolation,
    #[error("invalid EAT inputs: {0}")]
    InvalidInputs(String),
}

/// Upper end `(2 + √2)/4` of the nontrivial branch of `g`.
pub fn p_max() -> f64 {
    (2.0 + std::f64::consts::SQRT_2) / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EatInputs {
    /// Expected CHSH value `Î`, in the convention where local models reach 2.
    pub i_hat: f64,
    pub sigma: f64,
    pub eps_sigma: f64,
    /// Lower bound on the success probability; the comparison uses 1.
    pub kappa: f64,
}

impl EatInputs {
    pub fn validate(&self) -> Result<(), EatError> {
        if !(self.i_hat.is_finite() && self.i_hat <= 2.0 * std::f64::consts::SQRT_2 + 1e-12) {
            return Err(EatError::InvalidInputs(format!("I_hat = {} exceeds 2√2", self.i_hat)));
        }
        if self.i_hat <= 2.0 {
            return Err(EatError::NoViolation);
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(EatError::InvalidInputs(format!("kappa = {} not in (0, 1]", self.kappa)));
        }
        if !(self.eps_sigma > 0.0 && self.eps_sigma < 1.0) || !(self.sigma > 0.0) {
            return Err(EatError::InvalidInputs("need sigma > 0 and eps_sigma in (0, 1)".into()));
        }
        Ok(())
    }

    /// CHSH winning probability `Î/8 + 1/2`.
    pub fn winning_probability(&self) -> f64 {
        self.i_hat / 8.0 + 0.5
    }
}

pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// `√(16p(p − 1) + 3)`, clamped at 0 against rounding near `p = 3/4`.
fn root(p: f64) -> f64 {
    (16.0 * p * (p - 1.0) + 3.0).max(0.0).sqrt()
}

fn check_domain(p: f64) -> Result<(), EatError> {
    if (0.75..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(EatError::OutOfDomain(p))
    }
}

/// Entropy rate lower bound `g(p)` as a function of the winning probability.
pub fn g_rate(p: f64) -> Result<f64, EatError> {
    check_domain(p)?;
    if p >= p_max() {
        return Ok(1.0);
    }
    Ok(1.0 - binary_entropy(0.5 + 0.5 * root(p)))
}

/// `dg/dp = log₂(x/(1 − x))·(8p − 4)/s` with `s = √(16p(p − 1) + 3)` and
/// `x = (1 + s)/2`. Tends to `4/ln 2` at `p = 3/4` and diverges at `p_max`;
/// the left derivative (`+∞`) is used at and above `p_max`.
pub fn g_slope(p: f64) -> Result<f64, EatError> {
    check_domain(p)?;
    if p >= p_max() {
        return Ok(f64::INFINITY);
    }
    let s = root(p);
    // log₂(x/(1 − x)) = 2·atanh(s)/ln 2, with atanh(s)/s → 1 as s → 0.
    let ratio = if s < 1e-6 { 1.0 + s * s / 3.0 } else { s.atanh() / s };
    Ok(2.0 * (8.0 * p - 4.0) * ratio / std::f64::consts::LN_2)
}

/// Min-tradeoff function: `g` up to `p_t`, its tangent at `p_t` beyond.
pub fn f_min(p_t: f64, p: f64) -> Result<f64, EatError> {
    if p <= p_t {
        g_rate(p)
    } else {
        let d = g_slope(p_t)?;
        Ok(d * (p - p_t) + g_rate(p_t)?)
    }
}

/// Second-order penalty `2(log₂9 + g'(p_t))·√(1 − 2·log₂(εκ))`.
pub fn v_term(p_t: f64, eps: f64, kappa: f64) -> Result<f64, EatError> {
    Ok(2.0 * (9f64.log2() + g_slope(p_t)?) * (1.0 - 2.0 * (eps * kappa).log2()).sqrt())
}

/// Trials needed with tradeoff parameter `p_t`: the positive root of
/// `f·n − v·√n = σ` in `√n`, squared. Infinite where `f ≤ 0` or `v = ∞`.
pub fn n_eat_at(inputs: &EatInputs, p_t: f64) -> Result<f64, EatError> {
    let f = f_min(p_t, inputs.winning_probability())?;
    let v = v_term(p_t, inputs.eps_sigma, inputs.kappa)?;
    if f <= 0.0 || !v.is_finite() {
        return Ok(f64::INFINITY);
    }
    let r = (v + (v * v + 4.0 * inputs.sigma * f).sqrt()) / (2.0 * f);
    Ok(r * r)
}

/// Grid points over `[3/4, p_max]` before refinement.
pub const EAT_GRID: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EatResult {
    /// Minimum over `p_t`, unrounded.
    pub n_eat_real: f64,
    /// `⌈n_eat_real⌉`.
    pub n_eat: u64,
    pub p_t_star: f64,
}

/// Minimizes [`n_eat_at`] over `p_t ∈ [3/4, p_max]`: a uniform grid, then a
/// golden-section search between the neighbors of the best grid point.
pub fn n_eat(inputs: &EatInputs) -> Result<EatResult, EatError> {
    inputs.validate()?;
    let (lo, hi) = (0.75, p_max());
    let at = |i: usize| lo + (hi - lo) * i as f64 / EAT_GRID as f64;
    let mut best = (f64::INFINITY, 0);
    for i in 0..=EAT_GRID {
        let n = n_eat_at(inputs, at(i))?;
        if n < best.0 {
            best = (n, i);
        }
    }
    if !best.0.is_finite() {
        return Err(EatError::NoViolation);
    }
    let (mut a, mut b) = (at(best.1.saturating_sub(1)), at((best.1 + 1).min(EAT_GRID)));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (n_eat_at(inputs, c)?, n_eat_at(inputs, d)?);
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = n_eat_at(inputs, c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = n_eat_at(inputs, d)?;
        }
    }
    let (n, p_t) = [(best.0, at(best.1)), (fc, c), (fd, d)]
        .into_iter()
        .fold((f64::INFINITY, lo), |acc, x| if x.0 < acc.0 { x } else { acc });
    Ok(EatResult {
        n_eat_real: n,
        n_eat: n.ceil() as u64,
        p_t_star: p_t,
    })
}

/// Wall-clock hours to run `n` trials at `rate_hz`.
pub fn hours_at(n: f64, rate_hz: f64) -> f64 {
    n / rate_hz / 3600.0
}

/// Serializable summary of an EAT comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EatReport {
    #[serde(rename = "I_hat")]
    pub i_hat: f64,
    pub sigma: f64,
    pub eps_sigma: f64,
    pub kappa: f64,
    pub n_eat: u64,
    pub p_t_star: f64,
    /// Hours keyed by trial rate in Hz.
    pub runtime_hours_at: BTreeMap<String, f64>,
}

pub fn eat_report(inputs: &EatInputs, rates_hz: &[f64]) -> Result<EatReport, EatError> {
    let r = n_eat(inputs)?;
    Ok(EatReport {
        i_hat: inputs.i_hat,
        sigma: inputs.sigma,
        eps_sigma: inputs.eps_sigma,
        kappa: inputs.kappa,
        n_eat: r.n_eat,
        p_t_star: r.p_t_star,
        runtime_hours_at: rates_hz
            .iter()
            .map(|&rate| (format!("{rate}"), hours_at(r.n_eat_real, rate)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use proptest::prelude::*;

    fn inputs(excess: f64) -> EatInputs {
        EatInputs {
            i_hat: 2.0 + excess,
            sigma: reference::SIGMA as f64,
            eps_sigma: reference::SPLIT_SIGMA * reference::EPSILON,
            kappa: 1.0,
        }
    }

    #[test]
    fn g_endpoints_and_reference_value() {
        assert_eq!(g_rate(p_max()).unwrap(), 1.0);
        assert_eq!(g_rate(0.75).unwrap(), 0.0);
        assert!((g_rate(p_max() - 1e-13).unwrap() - 1.0).abs() < 1e-5);
        // 50-digit decimal evaluation of the closed form.
        assert!((g_rate(0.83).unwrap() - 0.637_118_348_099_229).abs() < 1e-14);
        assert!((g_slope(0.83).unwrap() - 11.489_661_909_687_347).abs() < 1e-11);
        assert!(g_rate(0.7).is_err() && g_rate(1.01).is_err());
    }

    #[test]
    fn slope_matches_finite_differences() {
        for p in [0.75 + 1e-4, 0.76, 0.8, 0.83, 0.85] {
            let h = 1e-6;
            let fd = (g_rate(p + h).unwrap() - g_rate(p - h.min(p - 0.75)).unwrap()) / (h + h.min(p - 0.75));
            let d = g_slope(p).unwrap();
            assert!((fd - d).abs() < 1e-4 * d.max(1.0), "p={p}: {fd} vs {d}");
        }
        let at_quarter = g_slope(0.75).unwrap();
        assert!((at_quarter - 4.0 / std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g_slope(0.75 + 1e-12).unwrap() - at_quarter).abs() < 1e-3);
    }

    #[test]
    fn tangent_extension() {
        for p_t in [0.751, 0.77, 0.8, 0.84] {
            let d = g_slope(p_t).unwrap();
            assert_eq!(f_min(p_t, p_t).unwrap(), g_rate(p_t).unwrap());
            let h = 1e-6;
            let right = (f_min(p_t, p_t + h).unwrap() - f_min(p_t, p_t).unwrap()) / h;
            assert!((right - d).abs() < 1e-6 * d.max(1.0));
            for i in 0..=200 {
                let p = 0.75 + (p_max() - 0.75) * i as f64 / 200.0;
                assert!(f_min(p_t, p).unwrap() <= g_rate(p).unwrap() + 1e-12, "p_t={p_t} p={p}");
            }
        }
    }

    #[test]
    fn published_trial_counts() {
        for (excess, want, rate) in reference::EAT_CASES {
            let r = n_eat(&inputs(excess)).unwrap();
            assert!((r.n_eat as f64 / want - 1.0).abs() < 5e-3, "{} vs {want}", r.n_eat);
            assert!(r.p_t_star > 0.75 && r.p_t_star < p_max());
            let hours = hours_at(r.n_eat_real, rate);
            assert!((hours / hours_at(want, rate) - 1.0).abs() < 5e-3);
        }
        assert!((hours_at(6.108e10, 1e5) - 169.7).abs() < 0.05);
        assert!((hours_at(1.737e10, 2e5) - 24.1).abs() < 0.05);
    }

    #[test]
    fn refinement_beats_the_grid() {
        let inp = inputs(1.142e-3);
        let r = n_eat(&inp).unwrap();
        for i in 0..=EAT_GRID {
            let p_t = 0.75 + (p_max() - 0.75) * i as f64 / EAT_GRID as f64;
            assert!(r.n_eat_real <= n_eat_at(&inp, p_t).unwrap());
        }
    }

    #[test]
    fn no_violation_is_an_error() {
        assert_eq!(n_eat(&inputs(0.0)), Err(EatError::NoViolation));
        assert_eq!(n_eat(&inputs(-0.1)), Err(EatError::NoViolation));
        assert!(
            n_eat(&EatInputs {
                kappa: 0.0,
                ..inputs(1e-3)
            })
            .is_err()
        );
    }

    #[test]
    fn report_serializes() {
        let rep = eat_report(&inputs(1.142e-3), &[1e5, 2e5]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        assert!(v["I_hat"].as_f64().unwrap() > 2.0);
        assert_eq!(v["runtime_hours_at"].as_object().unwrap().len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn g_is_nondecreasing(a in 0.75f64..1.0, b in 0.75f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(g_rate(lo).unwrap() <= g_rate(hi).unwrap() + 1e-15);
        }

        #[test]
        fn n_eat_is_monotone(excess in 5e-4f64..0.5, d in 0.0f64..0.2, kappa in 0.01f64..1.0, sigma in 10.0f64..5000.0) {
            let base = EatInputs { sigma, kappa, ..inputs(excess) };
            let n = n_eat(&base).unwrap().n_eat_real;
            let more_i = n_eat(&EatInputs { i_hat: (base.i_hat + d).min(2.0 * std::f64::consts::SQRT_2), ..base }).unwrap().n_eat_real;
            let more_k = n_eat(&EatInputs { kappa: (kappa * 2.0).min(1.0), ..base }).unwrap().n_eat_real;
            let more_s = n_eat(&EatInputs { sigma: sigma * 1.5, ..base }).unwrap().n_eat_real;
            let tol = 1e-9 * n;
            prop_assert!(more_i <= n + tol);
            prop_assert!(more_k <= n + tol);
            prop_assert!(more_s >= n - tol);
        }
    }
}
