//! End-to-end orchestration of protocol instances: calibration, power and PEF
//! optimization, planning, accumulation with early stopping, extraction, and
//! the JSON certificate that records all of it.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bell::{
    ConditionalDistribution, InputDistribution, PolytopeH, TrialRecord, VertexList, bias_vertices, chsh_value,
    enumerate_vertices,
};
use crate::calibration::{CalibrationError, CountTable, fit_max_likelihood};
use crate::extractor::{BitString, ExtractionHeader, ExtractorError, ExtractorParams, extract, weak_design};
use crate::pef::{
    BETA_RANGE, BetaSearchInputs, PefError, PefTable, PlanningReport, optimize_beta, optimize_pef_report, plan,
};
use crate::protocol::{Accumulator, CheckGranularity, ProtocolError, ProtocolParams, RunCertificate, plan_parameters};
use crate::reference;
use crate::simulator::{
    PRNG_VERSION, Sampler, SimConfig, SimError, interleave_counts, read_csv, read_trial_bytes, tally,
};

pub const CERTIFICATE_FORMAT: &str = "diqrand-certificate-v1";

/// Trials per subblock, about one second of data at the nominal rate.
pub const DEFAULT_SUBBLOCK: u64 = 100_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("trial data: {0}")]
    Trials(#[from] SimError),
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error("pef: {0}")]
    Pef(#[from] PefError),
    #[error("planning: {0}")]
    Planning(ProtocolError),
    #[error("accumulation: {0}")]
    Accumulation(ProtocolError),
    #[error("extraction: {0}")]
    Extraction(#[from] ExtractorError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What the user asks for: `k` bits with total error `eps`, of which
/// `split_sigma·eps` goes to smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub k: u32,
    pub eps: f64,
    pub split_sigma: f64,
}

impl Default for Request {
    fn default() -> Self {
        Self {
            k: reference::OUTPUT_BITS as u32,
            eps: reference::EPSILON,
            split_sigma: reference::SPLIT_SIGMA,
        }
    }
}

/// Simulated trials. For a run, `n` defaults to the trial budget and is
/// capped by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSource {
    pub nu: ConditionalDistribution,
    #[serde(default = "InputDistribution::uniform")]
    pub inputs: InputDistribution,
    pub rng_seed: u64,
    #[serde(default)]
    pub n: Option<u64>,
    #[serde(default)]
    pub drift: Vec<(u64, ConditionalDistribution)>,
}

impl SimSource {
    pub fn new(nu: ConditionalDistribution, rng_seed: u64) -> Self {
        Self {
            nu,
            inputs: InputDistribution::uniform(),
            rng_seed,
            n: None,
            drift: Vec::new(),
        }
    }

    pub fn config(&self, n: u64) -> SimConfig {
        SimConfig {
            nu: self.nu,
            inputs: self.inputs,
            n,
            rng_seed: self.rng_seed,
            drift: self.drift.clone(),
        }
    }
}

/// Where trials come from. Count tables are replayed in interleaved order;
/// files are BTR1, or CSV when the name ends in `.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrialSource {
    Counts { counts: CountTable },
    File { path: PathBuf },
    Simulator(SimSource),
}

/// Extractor seed. Raw files are read least significant bit of each byte
/// first; hex strings and hex files most significant nibble first. `Prng`
/// draws the seed from ChaCha8 and is only meant for simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedSource {
    Hex { hex: String },
    File { path: PathBuf },
    Prng { rng_seed: u64 },
}

/// Where the stopping rule is evaluated during accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCheck {
    #[default]
    PerTrial,
    Subblock,
}

fn default_eps_b() -> f64 {
    reference::EPS_B
}
fn default_f_max() -> f64 {
    reference::F_MAX
}
fn one() -> f64 {
    1.0
}
fn default_beta_range() -> (f64, f64) {
    BETA_RANGE
}
fn yes() -> bool {
    true
}
fn default_subblock() -> u64 {
    DEFAULT_SUBBLOCK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub request: Request,
    #[serde(default = "default_eps_b")]
    pub eps_b: f64,
    /// QEF scaling constant used during accumulation.
    #[serde(default = "default_f_max")]
    pub f_max: f64,
    /// Scaling constant assumed when planning the power and trial budget.
    #[serde(default = "one")]
    pub planning_f_max: f64,
    pub calibration: TrialSource,
    pub run: TrialSource,
    pub seed: SeedSource,
    /// Fixed power; searched over `beta_range` when absent.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_beta_range")]
    pub beta_range: (f64, f64),
    /// Run at the searched power rounded to three decimals.
    #[serde(default = "yes")]
    pub round_beta: bool,
    #[serde(default = "default_subblock")]
    pub subblock_size: u64,
    #[serde(default)]
    pub stop_check: StopCheck,
}

impl PipelineConfig {
    /// Instance defaults with the given sources.
    pub fn new(calibration: TrialSource, run: TrialSource, seed: SeedSource) -> Self {
        Self {
            request: Request::default(),
            eps_b: default_eps_b(),
            f_max: default_f_max(),
            planning_f_max: 1.0,
            calibration,
            run,
            seed,
            beta: None,
            beta_range: BETA_RANGE,
            round_beta: true,
            subblock_size: DEFAULT_SUBBLOCK,
            stop_check: StopCheck::PerTrial,
        }
    }

    /// Reads a JSON config. Relative file paths are taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for src in [&mut self.calibration, &mut self.run] {
            if let TrialSource::File { path } = src {
                fix(path);
            }
        }
        if let SeedSource::File { path } = &mut self.seed {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        plan_parameters(self.request.k, self.request.eps, self.request.split_sigma).map_err(PipelineError::Planning)?;
        if !(0.0..0.5).contains(&self.eps_b) {
            return Err(PipelineError::Config(format!("eps_b = {} not in [0, 1/2)", self.eps_b)));
        }
        for (name, v) in [("f_max", self.f_max), ("planning_f_max", self.planning_f_max)] {
            if !(v >= 1.0 && v.is_finite()) {
                return Err(PipelineError::Config(format!("{name} = {v} must be at least 1")));
            }
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b < 1.0) {
                return Err(PipelineError::Config(format!("beta = {b} not in (0, 1)")));
            }
        }
        if self.subblock_size == 0 {
            return Err(PipelineError::Config("subblock_size must be positive".into()));
        }
        for (name, src) in [("calibration", &self.calibration), ("run", &self.run)] {
            match src {
                TrialSource::File { path } if !path.is_file() => {
                    return Err(PipelineError::Config(format!(
                        "{name} file {} not found",
                        path.display()
                    )));
                }
                TrialSource::Simulator(s) => {
                    ConditionalDistribution::new(*s.nu.probs())
                        .map_err(|e| PipelineError::Config(format!("{name} simulator: {e}")))?;
                    if name == "calibration" && s.n.is_none_or(|n| n == 0) {
                        return Err(PipelineError::Config("calibration simulator needs n ≥ 1".into()));
                    }
                }
                _ => {}
            }
        }
        if let SeedSource::File { path } = &self.seed {
            if !path.is_file() {
                return Err(PipelineError::Config(format!("seed file {} not found", path.display())));
            }
        }
        Ok(())
    }

    fn check(&self) -> CheckGranularity {
        match self.stop_check {
            StopCheck::PerTrial => CheckGranularity::PerTrial,
            StopCheck::Subblock => CheckGranularity::Subblock(self.subblock_size),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rounds to 12 significant digits for reporting.
pub fn sig12(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.11e}").parse().expect("formatted float parses")
    } else {
        x
    }
}

/// 17 significant digits, enough to recover any `f64` exactly.
pub fn exact_str(x: f64) -> String {
    format!("{x:.16e}")
}

/// Trials loaded from a source, kept as raw bytes, with a digest of the
/// source in its stored form.
struct LoadedTrials {
    bytes: Vec<u8>,
    sha256: String,
}

fn load_file(path: &Path) -> Result<LoadedTrials> {
    let raw = std::fs::read(path).map_err(io_err(path))?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let bytes = if is_csv {
        read_csv(raw.as_slice())?.iter().map(TrialRecord::to_byte).collect()
    } else {
        read_trial_bytes(&mut raw.as_slice())?
    };
    Ok(LoadedTrials {
        bytes,
        sha256: sha256_hex(&raw),
    })
}

/// Reads a BTR1 trial file, or CSV when the name ends in `.csv`.
pub fn read_trial_file(path: &Path) -> Result<Vec<TrialRecord>> {
    let t = load_file(path)?;
    bytes_to_trials(&t.bytes).collect()
}

/// Extractor input bits of a trial sequence: `a` then `b` for every trial.
pub fn trial_outputs<'a>(trials: impl IntoIterator<Item = &'a TrialRecord>) -> BitString {
    let mut out = BitString::default();
    for t in trials {
        push_outputs(&mut out, t);
    }
    out
}

fn push_outputs(out: &mut BitString, t: &TrialRecord) {
    out.push_bits(u64::from(t.a) << 1 | u64::from(t.b), 2);
}

fn bytes_to_trials(bytes: &[u8]) -> impl Iterator<Item = Result<TrialRecord>> + '_ {
    bytes.iter().enumerate().map(|(i, &b)| {
        TrialRecord::from_byte(b).map_err(|source| {
            PipelineError::Accumulation(ProtocolError::InvalidTrial {
                index: i as u64,
                source,
            })
        })
    })
}

/// Calibration counts and the digest of the data they came from.
fn calibration_counts(src: &TrialSource) -> Result<(CountTable, String)> {
    match src {
        TrialSource::Counts { counts } => Ok((*counts, sha256_hex(&serde_json::to_vec(counts)?))),
        TrialSource::File { path } => {
            let t = load_file(path)?;
            let mut counts = CountTable::default();
            for r in bytes_to_trials(&t.bytes) {
                counts.record(&r?);
            }
            Ok((counts, t.sha256))
        }
        TrialSource::Simulator(s) => {
            let n =
                s.n.ok_or_else(|| PipelineError::Config("calibration simulator needs n".into()))?;
            let cfg = s.config(n);
            cfg.validate()?;
            let mut hasher = Sha256::new();
            let counts = tally(Sampler::range(&cfg, 0, n).inspect(|t| hasher.update([t.to_byte()])));
            Ok((counts, hex::encode(hasher.finalize())))
        }
    }
}

/// Calibrated behavior and fit diagnostics.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub counts: CountTable,
    pub nu: ConditionalDistribution,
    pub kkt_residual: f64,
    pub data_sha256: String,
}

pub fn calibrate(src: &TrialSource) -> Result<Calibration> {
    let (counts, data_sha256) = calibration_counts(src)?;
    let fit = fit_max_likelihood(&counts, &PolytopeH::tsirelson())?;
    Ok(Calibration {
        counts,
        nu: fit.nu,
        kkt_residual: fit.kkt_residual,
        data_sha256,
    })
}

/// Extreme points of the quantum-bounded non-signaling polytope, enumerated once.
pub fn tsirelson_vertices() -> &'static VertexList {
    static V: OnceLock<VertexList> = OnceLock::new();
    V.get_or_init(|| enumerate_vertices(&PolytopeH::tsirelson()).expect("Tsirelson polytope has vertices"))
}

/// Outcome of power selection and planning.
#[derive(Debug, Clone)]
pub struct Plan {
    pub params: ProtocolParams,
    /// PEF at the chosen power, scaled by the accumulation `f_max`.
    pub pef: PefTable,
    /// Unrounded minimizer of the expected trial count, when searched.
    pub beta_star: Option<f64>,
    pub report: PlanningReport,
}

/// Optimal PEF at `beta`. An unconverged solve still returns a valid table
/// whose objective bounds the optimum from below, so it is used as is.
fn pef_at(nu: &ConditionalDistribution, beta: f64, eps_b: f64) -> Result<PefTable> {
    let bias = bias_vertices(eps_b).map_err(PefError::from)?;
    match optimize_pef_report(nu, &InputDistribution::uniform(), beta, tsirelson_vertices(), &bias) {
        Ok(o) => Ok(o.pef),
        Err(PefError::NotConverged { best, .. }) => Ok(best.pef),
        Err(e) => Err(e.into()),
    }
}

pub fn plan_instance(cfg: &PipelineConfig, nu: &ConditionalDistribution) -> Result<Plan> {
    let r = cfg.request;
    let params = plan_parameters(r.k, r.eps, r.split_sigma).map_err(PipelineError::Planning)?;
    let uniform = InputDistribution::uniform();
    let (pef, beta_star) = match cfg.beta {
        Some(beta) => (pef_at(nu, beta, cfg.eps_b)?, None),
        None => {
            let bias = bias_vertices(cfg.eps_b).map_err(PefError::from)?;
            let inp = BetaSearchInputs {
                nu,
                input: &uniform,
                vertices: tsirelson_vertices(),
                bias: &bias,
                sigma: params.sigma as f64,
                eps_sigma: params.eps_sigma,
                f_max: cfg.planning_f_max,
            };
            let search = optimize_beta(&inp, cfg.beta_range)?;
            if cfg.round_beta && search.beta_reported > 0.0 {
                (pef_at(nu, search.beta_reported, cfg.eps_b)?, Some(search.beta_star))
            } else {
                (search.pef, Some(search.beta_star))
            }
        }
    };
    let report = plan(
        &pef.with_f_max(cfg.planning_f_max),
        nu,
        &uniform,
        params.sigma as f64,
        params.eps_sigma,
    )?;
    Ok(Plan {
        params: params.with_budget(report.n_budget),
        pef: pef.with_f_max(cfg.f_max),
        beta_star,
        report,
    })
}

/// Result of accumulation: the protocol outcome, the outputs `a, b` of every
/// processed trial, and a digest of the processed trial bytes.
#[derive(Debug, Clone)]
pub struct Accumulation {
    pub run: RunCertificate,
    pub outputs: BitString,
    pub trials_sha256: String,
}

/// Runs the protocol over `stream`, never reading past the trial budget.
pub fn accumulate_stream<I>(stream: I, plan: &Plan, check: CheckGranularity) -> Result<Accumulation>
where
    I: IntoIterator<Item = Result<TrialRecord>>,
{
    let mut acc = Accumulator::new(plan.pef, plan.params, check).map_err(PipelineError::Accumulation)?;
    let mut outputs = BitString::default();
    let mut hasher = Sha256::new();
    for t in stream.into_iter().take(plan.params.n_budget as usize) {
        let t = t?;
        let stop = acc.push(t).map_err(PipelineError::Accumulation)?;
        push_outputs(&mut outputs, &t);
        hasher.update([t.to_byte()]);
        if stop {
            break;
        }
    }
    Ok(Accumulation {
        run: acc.finish(),
        outputs,
        trials_sha256: hex::encode(hasher.finalize()),
    })
}

/// Extractor seed of `bits` bits and its digest.
pub fn load_seed(src: &SeedSource, bits: u64) -> Result<(BitString, String)> {
    let bits = bits as usize;
    let seed = match src {
        SeedSource::Hex { hex } => BitString::from_hex(hex, bits)?,
        SeedSource::File { path } => {
            let mut raw = Vec::new();
            std::fs::File::open(path)
                .and_then(|mut f| f.read_to_end(&mut raw))
                .map_err(io_err(path))?;
            let text = std::str::from_utf8(&raw).ok().map(str::trim);
            match text {
                Some(t) if !t.is_empty() && t.bytes().all(|c| c.is_ascii_hexdigit()) => BitString::from_hex(t, bits)?,
                _ => {
                    if raw.len() * 8 < bits {
                        return Err(ExtractorError::LengthMismatch {
                            what: "seed file",
                            expected: bits.div_ceil(8),
                            got: raw.len(),
                        }
                        .into());
                    }
                    let bools: Vec<bool> = (0..bits).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
                    BitString::from_bools(&bools)
                }
            }
        }
        SeedSource::Prng { rng_seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*rng_seed);
            // Stream 0 is used for trials; keep seeds on a separate stream.
            rng.set_stream(1);
            let mut bytes = vec![0u8; bits.div_ceil(8)];
            rng.fill_bytes(&mut bytes);
            BitString::from_bytes(&bytes, bits)?
        }
    };
    let digest = sha256_hex(&seed.to_bytes());
    Ok((seed, digest))
}

/// Extracts `k` bits from the trial outputs zero-padded to `m = 2·n_budget`.
pub fn extract_outputs(
    outputs: &BitString,
    params: &ProtocolParams,
    seed_src: &SeedSource,
) -> Result<(BitString, ExtractionHeader, String)> {
    let xp = ExtractorParams::new(2 * params.n_budget, params.k as u64, params.eps_x)?;
    let mut input = outputs.clone();
    if input.len() as u64 > xp.m {
        return Err(ExtractorError::InvalidInput(format!("{} output bits exceed m = {}", input.len(), xp.m)).into());
    }
    input.pad_to(xp.m as usize);
    let (seed, seed_sha256) = load_seed(seed_src, xp.d_provided)?;
    let bits = extract(&input, &seed, &xp, &weak_design(&xp))?;
    Ok((bits, xp.header()?, seed_sha256))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub trials: u64,
    pub counts: CountTable,
    pub nu: [[f64; 4]; 4],
    pub chsh: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningRecord {
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta_star: Option<f64>,
    pub f_max: f64,
    pub n_exp: f64,
    pub n_budget: u64,
    pub p_fail_bound: f64,
    pub expected_entropy_rate: f64,
}

/// PEF entries as 17-significant-digit strings, `[z][c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PefRecord {
    pub beta: String,
    pub f_max: String,
    pub f: [[String; 4]; 4],
}

impl PefRecord {
    pub fn new(pef: &PefTable) -> Self {
        Self {
            beta: exact_str(pef.beta),
            f_max: exact_str(pef.f_max),
            f: pef.f.map(|row| row.map(exact_str)),
        }
    }

    pub fn table(&self) -> std::result::Result<PefTable, PefError> {
        let p = |s: &String| {
            s.parse::<f64>()
                .map_err(|e| PefError::InvalidTable(format!("entry {s:?}: {e}")))
        };
        let mut f = [[0.0; 4]; 4];
        for z in 0..4 {
            for c in 0..4 {
                f[z][c] = p(&self.f[z][c])?;
            }
        }
        PefTable::new(f, p(&self.beta)?, p(&self.f_max)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulationRecord {
    #[serde(rename = "L")]
    pub l: f64,
    pub n_act: u64,
    pub certified_entropy: f64,
    pub entropy_rate: f64,
    pub stop_check: StopCheck,
    pub subblock_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub config_sha256: String,
    pub calibration_sha256: String,
    /// Digest of the stored run data (file bytes or count table JSON).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run_source_sha256: Option<String>,
    /// Digest of the processed trial bytes, one `(x, y, a, b)` byte per trial.
    pub trials_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed_sha256: Option<String>,
    pub prng_version: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub rng_seeds: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub format: String,
    pub success: bool,
    pub request: Request,
    pub params: ProtocolParams,
    pub eps_b: f64,
    pub calibration: CalibrationRecord,
    pub planning: PlanningRecord,
    pub pef: PefRecord,
    pub accumulation: AccumulationRecord,
    pub inputs: InputRecord,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub extractor: Option<ExtractionHeader>,
    /// Extracted bits as hex, most significant bit first.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub extracted: Option<String>,
}

impl Certificate {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cert: Self = serde_json::from_str(s)?;
        if cert.format != CERTIFICATE_FORMAT {
            return Err(PipelineError::Config(format!(
                "unknown certificate format {:?}",
                cert.format
            )));
        }
        Ok(cert)
    }
}

pub fn write_certificate(cert: &Certificate, path: &Path) -> Result<()> {
    std::fs::write(path, cert.to_json()?).map_err(io_err(path))
}

pub fn read_certificate(path: &Path) -> Result<Certificate> {
    Certificate::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

/// Everything produced by one instance.
#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub run: RunCertificate,
    pub certificate: Certificate,
    pub extracted: Option<BitString>,
}

fn rng_seeds(cfg: &PipelineConfig) -> Vec<(String, u64)> {
    let mut seeds = Vec::new();
    for (name, src) in [("calibration", &cfg.calibration), ("run", &cfg.run)] {
        if let TrialSource::Simulator(s) = src {
            seeds.push((name.to_string(), s.rng_seed));
        }
    }
    if let SeedSource::Prng { rng_seed } = cfg.seed {
        seeds.push(("seed".to_string(), rng_seed));
    }
    seeds
}

/// Accumulates over the configured run source.
fn accumulate_source(cfg: &PipelineConfig, plan: &Plan) -> Result<(Accumulation, Option<String>)> {
    let check = cfg.check();
    match &cfg.run {
        TrialSource::Counts { counts } => {
            let digest = sha256_hex(&serde_json::to_vec(counts)?);
            Ok((
                accumulate_stream(interleave_counts(counts).map(Ok), plan, check)?,
                Some(digest),
            ))
        }
        TrialSource::File { path } => {
            let t = load_file(path)?;
            Ok((
                accumulate_stream(bytes_to_trials(&t.bytes), plan, check)?,
                Some(t.sha256),
            ))
        }
        TrialSource::Simulator(s) => {
            let n = s.n.unwrap_or(plan.params.n_budget).min(plan.params.n_budget);
            let sim = s.config(n);
            sim.validate()?;
            Ok((
                accumulate_stream(Sampler::range(&sim, 0, n).map(Ok), plan, check)?,
                None,
            ))
        }
    }
}

/// Builds the certificate for a finished instance and extracts on success.
fn finish_instance(
    cfg: &PipelineConfig,
    cal: &Calibration,
    plan: &Plan,
    acc: Accumulation,
    run_source_sha256: Option<String>,
) -> Result<InstanceOutcome> {
    let mut run = acc.run;
    let (extracted, header, seed_sha256) = if run.success {
        let (bits, header, digest) = extract_outputs(&acc.outputs, &plan.params, &cfg.seed)?;
        run.extracted = Some(bits.to_bools());
        (Some(bits), Some(header), Some(digest))
    } else {
        (None, None, None)
    };
    let certificate = Certificate {
        format: CERTIFICATE_FORMAT.to_string(),
        success: run.success,
        request: cfg.request,
        params: plan.params,
        eps_b: cfg.eps_b,
        calibration: CalibrationRecord {
            trials: cal.counts.total(),
            counts: cal.counts,
            nu: *cal.nu.probs(),
            chsh: sig12(chsh_value(&cal.nu)),
            kkt_residual: cal.kkt_residual,
        },
        planning: PlanningRecord {
            beta: plan.pef.beta,
            beta_star: plan.beta_star,
            f_max: cfg.planning_f_max,
            n_exp: sig12(plan.report.n_exp),
            n_budget: plan.report.n_budget,
            p_fail_bound: sig12(plan.report.p_fail_bound),
            expected_entropy_rate: sig12(plan.report.entropy_rate),
        },
        pef: PefRecord::new(&plan.pef),
        accumulation: AccumulationRecord {
            l: sig12(run.l),
            n_act: run.n_act,
            certified_entropy: sig12(run.certified_entropy),
            entropy_rate: sig12(if run.n_act > 0 { run.entropy_rate() } else { 0.0 }),
            stop_check: cfg.stop_check,
            subblock_size: cfg.subblock_size,
        },
        inputs: InputRecord {
            config_sha256: sha256_hex(&serde_json::to_vec(cfg)?),
            calibration_sha256: cal.data_sha256.clone(),
            run_source_sha256,
            trials_sha256: acc.trials_sha256,
            seed_sha256,
            prng_version: PRNG_VERSION.to_string(),
            rng_seeds: rng_seeds(cfg),
        },
        extractor: header,
        extracted: extracted.as_ref().map(BitString::to_hex),
    };
    Ok(InstanceOutcome {
        run,
        certificate,
        extracted,
    })
}

/// One protocol instance: calibrate, choose the power and PEF, plan the
/// trial budget, accumulate with early stopping and extract on success.
pub fn run_instance(cfg: &PipelineConfig) -> Result<InstanceOutcome> {
    cfg.validate()?;
    let cal = calibrate(&cfg.calibration)?;
    let plan = plan_instance(cfg, &cal.nu)?;
    let (acc, digest) = accumulate_source(cfg, &plan)?;
    finish_instance(cfg, &cal, &plan, acc, digest)
}

/// Config replaying instance `i` (0-based) of the published data: its
/// calibration counts, its published power, and its analysis counts as the
/// run stream.
pub fn published_config(i: usize, seed: SeedSource) -> PipelineConfig {
    PipelineConfig {
        beta: Some(reference::BETAS[i]),
        ..PipelineConfig::new(
            TrialSource::Counts {
                counts: CountTable::new(reference::CALIBRATION_COUNTS[i]),
            },
            TrialSource::Counts {
                counts: CountTable::new(reference::ANALYSIS_COUNTS[i]),
            },
            seed,
        )
    }
}

/// Replays all published instances in order. Instance `i` draws its
/// extractor seed from `Prng { seed_base + i }` unless `seed` is given.
pub fn replay_published(seed: Option<&SeedSource>, seed_base: u64) -> Vec<Result<InstanceOutcome>> {
    (0..reference::INSTANCES)
        .map(|i| {
            let s = seed.cloned().unwrap_or(SeedSource::Prng {
                rng_seed: seed_base + i as u64,
            });
            run_instance(&published_config(i, s))
        })
        .collect()
}

/// Sequential instances over one stream, as in the experiment: each
/// instance calibrates on the `calibration_subblocks` subblocks preceding its
/// first trial, accumulates until it stops, and the next instance starts at
/// the first unused subblock. The config's `calibration` source is ignored
/// and its `run` source must be a file or a simulator.
pub fn run_sequence(
    cfg: &PipelineConfig,
    instances: usize,
    calibration_subblocks: u64,
) -> Result<Vec<InstanceOutcome>> {
    cfg.validate()?;
    let b = cfg.subblock_size;
    let window = calibration_subblocks
        .checked_mul(b)
        .filter(|&w| w > 0)
        .ok_or_else(|| PipelineError::Config("calibration window must be positive".into()))?;
    let (bytes, sim, source_digest) = match &cfg.run {
        TrialSource::File { path } => {
            let t = load_file(path)?;
            (Some(t.bytes), None, Some(t.sha256))
        }
        TrialSource::Simulator(s) => (None, Some(s), None),
        TrialSource::Counts { .. } => {
            return Err(PipelineError::Config(
                "sequential runs need an ordered trial stream".into(),
            ));
        }
    };
    let len = match (&bytes, sim) {
        (Some(b), _) => b.len() as u64,
        (None, Some(s)) => s.n.unwrap_or(u64::MAX),
        _ => unreachable!(),
    };
    let range = |start: u64, n: u64| -> Box<dyn Iterator<Item = Result<TrialRecord>> + '_> {
        let end = start.saturating_add(n).min(len);
        match (&bytes, sim) {
            (Some(b), _) => Box::new(bytes_to_trials(&b[start as usize..end as usize])),
            (None, Some(s)) => Box::new(Sampler::range(&s.config(len), start, end.saturating_sub(start)).map(Ok)),
            _ => unreachable!(),
        }
    };

    let mut out = Vec::with_capacity(instances);
    let mut start = window;
    for _ in 0..instances {
        if start > len {
            return Err(PipelineError::Config(format!("stream of {len} trials exhausted")));
        }
        let mut counts = CountTable::default();
        let mut hasher = Sha256::new();
        for t in range(start - window, window) {
            let t = t?;
            counts.record(&t);
            hasher.update([t.to_byte()]);
        }
        let fit = fit_max_likelihood(&counts, &PolytopeH::tsirelson())?;
        let cal = Calibration {
            counts,
            nu: fit.nu,
            kkt_residual: fit.kkt_residual,
            data_sha256: hex::encode(hasher.finalize()),
        };
        let plan = plan_instance(cfg, &cal.nu)?;
        let acc = accumulate_stream(range(start, plan.params.n_budget), &plan, cfg.check())?;
        let used = acc.run.n_act.max(1);
        let outcome = finish_instance(cfg, &cal, &plan, acc, source_digest.clone())?;
        out.push(outcome);
        start += used.div_ceil(b) * b;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance1_nu() -> ConditionalDistribution {
        ConditionalDistribution::from_approx(reference::CALIBRATED_DISTRIBUTIONS[0]).unwrap()
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(sig12(1116.123456789012), 1116.12345679);
        assert_eq!(sig12(0.0), 0.0);
        assert_eq!(exact_str(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(exact_str(1.0 / 3.0).len(), "3.3333333333333331e-1".len());
    }

    #[test]
    fn pef_record_round_trips_exactly() {
        let pef = PefTable::new(reference::PEFS[0], 0.01, reference::F_MAX).unwrap();
        assert_eq!(PefRecord::new(&pef).table().unwrap(), pef);
    }

    #[test]
    fn seeds_from_every_source_agree_on_length_and_order() {
        let hex = SeedSource::Hex { hex: "a5f0".into() };
        let (s, _) = load_seed(&hex, 12).unwrap();
        assert_eq!(s.to_bools()[..4], [true, false, true, false]);

        let dir = std::env::temp_dir().join(format!("diqrand-seed-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let raw = dir.join("seed.bin");
        std::fs::write(&raw, [0b0000_0101u8, 0xff]).unwrap();
        let (s, _) = load_seed(&SeedSource::File { path: raw.clone() }, 10).unwrap();
        assert_eq!(
            s.to_bools(),
            [true, false, true, false, false, false, false, false, true, true]
        );
        assert!(load_seed(&SeedSource::File { path: raw }, 17).is_err());
        let hex_file = dir.join("seed.hex");
        std::fs::write(&hex_file, "a5f0\n").unwrap();
        assert_eq!(
            load_seed(&SeedSource::File { path: hex_file }, 12).unwrap().0,
            load_seed(&hex, 12).unwrap().0
        );

        let prng = SeedSource::Prng { rng_seed: 9 };
        let (a, da) = load_seed(&prng, 1000).unwrap();
        let (b, db) = load_seed(&prng, 1000).unwrap();
        assert_eq!((a.len(), &a, da), (1000, &b, db));
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn config_json_defaults_and_validation() {
        let json = r#"{
            "calibration": {"kind": "counts", "counts": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]},
            "run": {"kind": "simulator", "nu": [[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25]], "rng_seed": 3},
            "seed": {"kind": "prng", "rng_seed": 1}
        }"#;
        let cfg: PipelineConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.request, Request::default());
        assert_eq!(
            (cfg.eps_b, cfg.f_max, cfg.planning_f_max),
            (1e-3, reference::F_MAX, 1.0)
        );
        assert_eq!(
            (cfg.subblock_size, cfg.stop_check, cfg.round_beta),
            (DEFAULT_SUBBLOCK, StopCheck::PerTrial, true)
        );
        cfg.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);

        let mut bad = cfg.clone();
        bad.request.split_sigma = 1.0;
        assert!(matches!(bad.validate(), Err(PipelineError::Planning(_))));
        let mut missing = cfg.clone();
        missing.run = TrialSource::File {
            path: "/nonexistent/trials.btr".into(),
        };
        assert!(missing.validate().unwrap_err().to_string().contains("not found"));
        let mut no_n = cfg;
        no_n.calibration = no_n.run.clone();
        assert!(no_n.validate().is_err());
    }

    #[test]
    fn fixed_power_plan_matches_published_budget() {
        let cfg = published_config(0, SeedSource::Prng { rng_seed: 0 });
        let plan = plan_instance(&cfg, &instance1_nu()).unwrap();
        assert_eq!(plan.params.sigma, reference::SIGMA);
        // The re-optimized table is at least as good as the published one.
        assert!(
            plan.params.n_budget <= reference::TRIAL_BUDGETS[0] + 2,
            "{}",
            plan.params.n_budget
        );
        assert!(
            plan.params.n_budget + 200 >= reference::TRIAL_BUDGETS[0],
            "{}",
            plan.params.n_budget
        );
        assert_eq!(plan.pef.f_max, reference::F_MAX);
    }

    #[test]
    fn local_behavior_stops_before_any_run() {
        let nu = ConditionalDistribution::deterministic([0, 0], [0, 0]);
        let cfg = PipelineConfig::new(
            TrialSource::Simulator(SimSource {
                n: Some(10_000),
                ..SimSource::new(nu, 4)
            }),
            TrialSource::Simulator(SimSource::new(nu, 5)),
            SeedSource::Prng { rng_seed: 0 },
        );
        let err = run_instance(&cfg).unwrap_err();
        assert!(
            matches!(err, PipelineError::Pef(PefError::NoCertifiableRandomness)),
            "{err}"
        );
    }

    #[test]
    fn failed_run_certificate_has_no_output() {
        // A run cut short at 1000 trials cannot reach the threshold.
        let cfg = PipelineConfig {
            beta: Some(0.01),
            run: TrialSource::Simulator(SimSource {
                n: Some(1000),
                ..SimSource::new(instance1_nu(), 11)
            }),
            ..published_config(0, SeedSource::Prng { rng_seed: 0 })
        };
        let out = run_instance(&cfg).unwrap();
        assert!(!out.run.success);
        assert_eq!(out.run.n_act, 1000);
        assert!(out.extracted.is_none());
        let json = out.certificate.to_json().unwrap();
        assert!(json.contains("\"success\": false"));
        assert!(!json.contains("\"extracted\""));
        assert_eq!(Certificate::from_json(&json).unwrap(), out.certificate);
    }
}
