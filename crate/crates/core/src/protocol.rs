//! Parameter planning, sequential log-QEF accumulation with early stopping, and
//! run certificates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bell::{BellError, TrialRecord};
use crate::calibration::CountTable;
use crate::pef::{PefTable, smoothing_term};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid protocol parameter: {0}")]
    InvalidParams(String),
    #[error("trial {index}: {source}")]
    InvalidTrial { index: u64, source: BellError },
    #[error("trial {index}: F(c={c}, z={z}) = 0, the run cannot continue")]
    ZeroFactor { index: u64, c: usize, z: usize },
    #[error("stream exceeds the trial budget of {0}")]
    BudgetExceeded(u64),
}

/// Security and length parameters of one protocol instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Requested output bits.
    pub k: u32,
    pub eps: f64,
    pub eps_sigma: f64,
    pub eps_x: f64,
    /// Entropy threshold in bits.
    pub sigma: u64,
    /// Maximum number of trials; 0 until planned.
    pub n_budget: u64,
}

/// `k + 4·log₂k + 4·log₂(2/ε_x²) + 6`, the least entropy the extractor needs.
pub fn sigma_lower_bound(k: u32, eps_x: f64) -> f64 {
    let k = k as f64;
    k + 4.0 * k.log2() + 4.0 * smoothing_term(eps_x) + 6.0
}

/// Splits `eps` between smoothing and extraction and picks the smallest
/// admissible threshold. `n_budget` is left at 0.
pub fn plan_parameters(k: u32, eps: f64, split_sigma: f64) -> Result<ProtocolParams, ProtocolError> {
    if k == 0 {
        return Err(ProtocolError::InvalidParams("k must be at least 1".into()));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(ProtocolError::InvalidParams(format!("eps = {eps} not in (0, 1]")));
    }
    if !(split_sigma > 0.0 && split_sigma < 1.0) {
        return Err(ProtocolError::InvalidParams(format!(
            "split_sigma = {split_sigma} not in (0, 1)"
        )));
    }
    let eps_sigma = split_sigma * eps;
    let eps_x = (1.0 - split_sigma) * eps;
    let sigma = sigma_lower_bound(k, eps_x).ceil() as u64;
    Ok(ProtocolParams {
        k,
        eps,
        eps_sigma,
        eps_x,
        sigma,
        n_budget: 0,
    })
}

impl ProtocolParams {
    pub fn with_budget(mut self, n_budget: u64) -> Self {
        self.n_budget = n_budget;
        self
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !(in_unit(self.eps) && in_unit(self.eps_sigma) && in_unit(self.eps_x)) {
            return Err(ProtocolError::InvalidParams(
                "error parameters must lie in (0, 1]".into(),
            ));
        }
        // Relative slack for the rounding in eps·split + eps·(1 − split).
        if self.eps_sigma + self.eps_x > self.eps * (1.0 + 1e-12) {
            return Err(ProtocolError::InvalidParams("eps_sigma + eps_x exceeds eps".into()));
        }
        if self.k == 0 || (self.sigma as f64) < sigma_lower_bound(self.k, self.eps_x) {
            return Err(ProtocolError::InvalidParams(format!(
                "sigma = {} is below the extractor requirement {:.3}",
                self.sigma,
                sigma_lower_bound(self.k, self.eps_x)
            )));
        }
        Ok(())
    }
}

/// `(L − log₂(2/ε_σ²))/β`.
pub fn certified_entropy(l: f64, beta: f64, eps_sigma: f64) -> f64 {
    (l - smoothing_term(eps_sigma)) / beta
}

/// Outcome of one protocol instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCertificate {
    /// Running log₂-QEF value at the last processed trial.
    pub l: f64,
    /// Trials processed; the stopping index on success.
    pub n_act: u64,
    pub success: bool,
    pub certified_entropy: f64,
    pub params: ProtocolParams,
    pub pef: PefTable,
    pub extracted: Option<Vec<bool>>,
}

impl RunCertificate {
    /// `L / (β·n_act)`, the realized entropy per trial.
    pub fn entropy_rate(&self) -> f64 {
        self.l / (self.pef.beta * self.n_act as f64)
    }
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Where the stopping rule is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckGranularity {
    #[default]
    PerTrial,
    /// Only after every `n`-th trial and at the end of the stream.
    Subblock(u64),
}

/// Sequential accumulator for one instance.
#[derive(Debug, Clone)]
pub struct Accumulator {
    log_qef: [[f64; 4]; 4],
    pef: PefTable,
    params: ProtocolParams,
    check: CheckGranularity,
    sum: CompensatedSum,
    n: u64,
    stopped: bool,
}

impl Accumulator {
    pub fn new(pef: PefTable, params: ProtocolParams, check: CheckGranularity) -> Result<Self, ProtocolError> {
        params.validate()?;
        if params.n_budget == 0 {
            return Err(ProtocolError::InvalidParams("n_budget must be positive".into()));
        }
        if let CheckGranularity::Subblock(0) = check {
            return Err(ProtocolError::InvalidParams("subblock size must be positive".into()));
        }
        Ok(Self {
            log_qef: pef.qef_log2_table(),
            pef,
            params,
            check,
            sum: CompensatedSum::default(),
            n: 0,
            stopped: false,
        })
    }

    pub fn l(&self) -> f64 {
        self.sum.value()
    }

    pub fn trials(&self) -> u64 {
        self.n
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    fn crossed(&self) -> bool {
        certified_entropy(self.l(), self.pef.beta, self.params.eps_sigma) >= self.params.sigma as f64
    }

    /// Processes one trial. Returns `true` once the run has stopped successfully;
    /// further trials are ignored.
    pub fn push(&mut self, t: TrialRecord) -> Result<bool, ProtocolError> {
        if self.stopped {
            return Ok(true);
        }
        if self.n >= self.params.n_budget {
            return Err(ProtocolError::BudgetExceeded(self.params.n_budget));
        }
        let (c, z) = (t.c(), t.z());
        let v = self.log_qef[z][c];
        if v == f64::NEG_INFINITY {
            return Err(ProtocolError::ZeroFactor { index: self.n, c, z });
        }
        self.sum.add(v);
        self.n += 1;
        let due = match self.check {
            CheckGranularity::PerTrial => true,
            CheckGranularity::Subblock(b) => self.n % b == 0 || self.n == self.params.n_budget,
        };
        if due && self.crossed() {
            self.stopped = true;
        }
        Ok(self.stopped)
    }

    /// Validates and processes one raw trial byte.
    pub fn push_byte(&mut self, b: u8) -> Result<bool, ProtocolError> {
        let t = TrialRecord::from_byte(b).map_err(|source| ProtocolError::InvalidTrial { index: self.n, source })?;
        self.push(t)
    }

    /// Closes the run. A pending subblock is checked at the end of the stream.
    pub fn finish(mut self) -> RunCertificate {
        if !self.stopped && self.crossed() {
            self.stopped = true;
        }
        let l = self.l();
        RunCertificate {
            l,
            n_act: self.n,
            success: self.stopped,
            certified_entropy: certified_entropy(l, self.pef.beta, self.params.eps_sigma),
            params: self.params,
            pef: self.pef,
            extracted: None,
        }
    }
}

/// Runs the protocol over `stream`, stopping at the first trial where the
/// certified entropy reaches `σ`.
pub fn accumulate<I>(
    stream: I,
    pef: &PefTable,
    params: &ProtocolParams,
    check: CheckGranularity,
) -> Result<RunCertificate, ProtocolError>
where
    I: IntoIterator<Item = TrialRecord>,
{
    let mut acc = Accumulator::new(*pef, *params, check)?;
    for t in stream {
        if acc.push(t)? {
            break;
        }
    }
    Ok(acc.finish())
}

/// [`accumulate`] over raw trial bytes `(x, y, a, b)` in the low four bits.
pub fn accumulate_bytes(
    bytes: &[u8],
    pef: &PefTable,
    params: &ProtocolParams,
    check: CheckGranularity,
) -> Result<RunCertificate, ProtocolError> {
    let mut acc = Accumulator::new(*pef, *params, check)?;
    for &b in bytes {
        if acc.push_byte(b)? {
            break;
        }
    }
    Ok(acc.finish())
}

/// Full-pass accumulation over a count table, without early stopping. The
/// result depends only on the counts; `n_act` is their total.
pub fn accumulate_counts(
    counts: &CountTable,
    pef: &PefTable,
    params: &ProtocolParams,
) -> Result<RunCertificate, ProtocolError> {
    params.validate()?;
    let table = pef.qef_log2_table();
    let mut sum = CompensatedSum::default();
    for z in 0..4 {
        for c in 0..4 {
            let n = counts.get(c, z);
            if n == 0 {
                continue;
            }
            if table[z][c] == f64::NEG_INFINITY {
                return Err(ProtocolError::ZeroFactor { index: 0, c, z });
            }
            sum.add(n as f64 * table[z][c]);
        }
    }
    let l = sum.value();
    let h = certified_entropy(l, pef.beta, params.eps_sigma);
    Ok(RunCertificate {
        l,
        n_act: counts.total(),
        success: h >= params.sigma as f64,
        certified_entropy: h,
        params: *params,
        pef: *pef,
        extracted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use proptest::prelude::*;

    fn params(n_budget: u64) -> ProtocolParams {
        plan_parameters(512, reference::EPSILON, reference::SPLIT_SIGMA)
            .unwrap()
            .with_budget(n_budget)
    }

    fn published_pef(i: usize) -> PefTable {
        PefTable::new(reference::PEFS[i], reference::BETAS[i], reference::F_MAX).unwrap()
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(params(0).sigma, 1089);
        let p = plan_parameters(1, reference::EPSILON, 0.8).unwrap();
        assert_eq!(p.sigma, 542);
        for bad in [0.0, 1.0, -0.5, 1.5] {
            assert!(plan_parameters(512, reference::EPSILON, bad).is_err());
        }
        assert!(plan_parameters(0, reference::EPSILON, 0.8).is_err());
    }

    #[test]
    fn certified_entropy_examples() {
        let eps_s = 0.8 * reference::EPSILON;
        let thr = smoothing_term(eps_s);
        assert!((thr - 129.643_856_189_774_74).abs() < 1e-11);
        assert_eq!(certified_entropy(thr, 0.01, eps_s), 0.0);
        // Instance 1 end state, from the published rate and trial count.
        let l = 0.010 * 6.07e-4 * 2.32e7;
        let h = certified_entropy(l, 0.010, eps_s);
        assert!((h - 1117.8).abs() < 1.0 && h >= 1089.0, "{h}");
    }

    #[test]
    fn unit_pef_never_succeeds() {
        let p = params(1000);
        let stream = (0..1000).map(|i| TrialRecord::from_byte((i % 16) as u8).unwrap());
        let cert = accumulate(stream, &PefTable::unit(0.01), &p, CheckGranularity::PerTrial).unwrap();
        assert_eq!(cert.l, 0.0);
        assert!(!cert.success);
        assert_eq!(cert.n_act, 1000);
    }

    #[test]
    fn stops_at_first_crossing() {
        // Every trial adds exactly 1 bit; the threshold is crossed at
        // L = β·σ + log₂(2/ε_σ²).
        let mut f = [[2.0; 4]; 4];
        f[0][0] = 2.0;
        let pef = PefTable::new(f, 0.01, 1.0).unwrap();
        let p = params(1000);
        let need = (pef.beta * p.sigma as f64 + smoothing_term(p.eps_sigma)).ceil() as u64;
        let stream = std::iter::repeat_n(TrialRecord::from_byte(0).unwrap(), 1000);
        let cert = accumulate(stream, &pef, &p, CheckGranularity::PerTrial).unwrap();
        assert!(cert.success);
        assert_eq!(cert.n_act, need);
        assert!(certified_entropy(cert.l - 1.0, pef.beta, p.eps_sigma) < p.sigma as f64);

        let stream = std::iter::repeat_n(TrialRecord::from_byte(0).unwrap(), 1000);
        let sub = accumulate(stream, &pef, &p, CheckGranularity::Subblock(100)).unwrap();
        assert!(sub.success);
        assert_eq!(sub.n_act, need.div_ceil(100) * 100);
    }

    #[test]
    fn zero_factor_aborts() {
        let mut f = [[1.0; 4]; 4];
        f[2][3] = 0.0;
        let pef = PefTable::new(f, 0.01, 1.0).unwrap();
        let bad = TrialRecord::from_cells(3, 2);
        let stream = [TrialRecord::from_byte(0).unwrap(), bad];
        let err = accumulate(stream, &pef, &params(10), CheckGranularity::PerTrial).unwrap_err();
        assert_eq!(err, ProtocolError::ZeroFactor { index: 1, c: 3, z: 2 });
    }

    #[test]
    fn invalid_bytes_and_budget_are_rejected() {
        let pef = PefTable::unit(0.01);
        let err = accumulate_bytes(&[0, 1, 0x10], &pef, &params(10), CheckGranularity::PerTrial);
        assert!(matches!(err, Err(ProtocolError::InvalidTrial { index: 2, .. })));
        let err = accumulate_bytes(&[0; 11], &pef, &params(10), CheckGranularity::PerTrial);
        assert_eq!(err.unwrap_err(), ProtocolError::BudgetExceeded(10));
    }

    #[test]
    fn batch_replay_matches_published_rates() {
        for i in 0..5 {
            let counts = CountTable::new(reference::ANALYSIS_COUNTS[i]);
            let cert = accumulate_counts(&counts, &published_pef(i), &params(u64::MAX)).unwrap();
            let rate = cert.entropy_rate();
            let want = reference::ENTROPY_RATES[i];
            assert!((rate / want - 1.0).abs() < 0.01, "{i}: {rate} vs {want}");
            assert!(
                cert.success && cert.certified_entropy >= 1089.0,
                "{i}: {}",
                cert.certified_entropy
            );
        }
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut s = CompensatedSum::default();
        let mut naive = 0.0;
        s.add(1e16);
        naive += 1e16;
        for _ in 0..1000 {
            s.add(1.0);
            naive += 1.0;
        }
        s.add(-1e16);
        naive -= 1e16;
        assert_eq!(s.value(), 1000.0);
        assert_ne!(naive, 1000.0);
    }

    fn record() -> impl Strategy<Value = TrialRecord> {
        (0u8..16).prop_map(|b| TrialRecord::from_byte(b).unwrap())
    }

    proptest! {
        #[test]
        fn full_pass_is_order_independent(mut trials in prop::collection::vec(record(), 1..400), seed in any::<u64>()) {
            let pef = published_pef(0).scaled(0.999);
            let p = params(10_000);
            let a = accumulate(trials.clone(), &pef, &p, CheckGranularity::PerTrial).unwrap();
            // Deterministic shuffle.
            let mut s = seed;
            for i in (1..trials.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                trials.swap(i, (s >> 33) as usize % (i + 1));
            }
            let b = accumulate(trials.clone(), &pef, &p, CheckGranularity::PerTrial).unwrap();
            prop_assert!(!a.success && !b.success);
            prop_assert!((a.l - b.l).abs() <= 1e-12);
            let mut counts = CountTable::default();
            for t in &trials {
                counts.record(t);
            }
            let c = accumulate_counts(&counts, &pef, &p).unwrap();
            prop_assert!((a.l - c.l).abs() <= 1e-12);
        }

        #[test]
        fn early_stop_is_minimal(bits in 0.5f64..3.0, n in 100u64..2000) {
            let pef = PefTable::new([[2f64.powf(bits); 4]; 4], 0.01, 1.0).unwrap();
            let p = params(n);
            let stream = (0..n).map(|i| TrialRecord::from_byte((i % 16) as u8).unwrap());
            let cert = accumulate(stream, &pef, &p, CheckGranularity::PerTrial).unwrap();
            let log_f = pef.qef_log2_table()[0][0];
            if cert.success {
                prop_assert!(cert.certified_entropy >= p.sigma as f64);
                prop_assert!(cert.n_act <= n);
                let before = certified_entropy(cert.l - log_f, pef.beta, p.eps_sigma);
                prop_assert!(before < p.sigma as f64);
            } else {
                prop_assert_eq!(cert.n_act, n);
                prop_assert!(cert.certified_entropy < p.sigma as f64);
            }
        }

        #[test]
        fn certified_entropy_is_monotone(l1 in -1e3f64..1e4, dl in 0f64..1e3, beta in 1e-4f64..1.0) {
            let e = 0.8 * reference::EPSILON;
            prop_assert!(certified_entropy(l1 + dl, beta, e) >= certified_entropy(l1, beta, e));
        }
    }
}
