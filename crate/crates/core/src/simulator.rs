//! Seeded simulation of i.i.d. Bell-trial streams, tallying, and trial files.
//!
//! Trial `i` consumes ChaCha8 words `4i..4i+4` (two `u64`s: one for the
//! setting, one for the outcome), so any range of the stream can be generated
//! independently and concatenated ranges equal the single-pass stream.

use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bell::{BellError, ConditionalDistribution, InputDistribution, TrialRecord, bias_vertices};
use crate::calibration::CountTable;

/// Identifies the generator and the word layout; recorded in certificates.
pub const PRNG_VERSION: &str = "chacha8-rand_chacha0.10-4w-per-trial-v1";

/// Nominal trial rate of the experiment, used only for latency reporting.
pub const NOMINAL_TRIAL_RATE_HZ: f64 = 100_000.0;

pub const TRIAL_FILE_MAGIC: &[u8; 4] = b"BTR1";
pub const TRIAL_FILE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Bell(#[from] BellError),
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
    #[error("trial file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Simulation parameters. `drift` optionally replaces `nu` from a given trial
/// index on, giving a piecewise-constant behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub nu: ConditionalDistribution,
    pub inputs: InputDistribution,
    pub n: u64,
    pub rng_seed: u64,
    #[serde(default)]
    pub drift: Vec<(u64, ConditionalDistribution)>,
}

impl SimConfig {
    pub fn new(nu: ConditionalDistribution, inputs: InputDistribution, n: u64, rng_seed: u64) -> Self {
        Self {
            nu,
            inputs,
            n,
            rng_seed,
            drift: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::InvalidConfig("n must be at least 1".into()));
        }
        if !self.drift.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(SimError::InvalidConfig(
                "drift segments must start at increasing trials".into(),
            ));
        }
        Ok(())
    }

    /// Behavior in force at trial `i`.
    pub fn nu_at(&self, i: u64) -> &ConditionalDistribution {
        self.drift
            .iter()
            .rev()
            .find(|(start, _)| *start <= i)
            .map_or(&self.nu, |(_, nu)| nu)
    }
}

/// Cumulative thresholds on `u64` draws for inverse-CDF sampling over four
/// cells in index order. Cells of probability 0 are never drawn.
#[derive(Debug, Clone, Copy)]
struct Cdf([u128; 4]);

impl Cdf {
    fn new(p: &[f64; 4]) -> Self {
        let scale = 2f64.powi(64);
        let last = (0..4).rev().find(|&k| p[k] > 0.0).unwrap_or(3);
        let mut t = [0u128; 4];
        let mut acc = 0.0;
        for k in 0..4 {
            acc += p[k];
            t[k] = if k >= last {
                1 << 64
            } else {
                ((acc * scale) as u128).min(1 << 64)
            };
        }
        Self(t)
    }

    #[inline]
    fn draw(&self, u: u64) -> usize {
        let u = u as u128;
        self.0.iter().position(|&t| u < t).unwrap_or(3)
    }
}

/// Lazily generated trial stream.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    input_cdf: Cdf,
    /// `(first trial, per-setting outcome CDFs)`, in order.
    segments: Vec<(u64, [Cdf; 4])>,
    seg: usize,
    next: u64,
    end: u64,
}

fn outcome_cdfs(nu: &ConditionalDistribution) -> [Cdf; 4] {
    std::array::from_fn(|z| Cdf::new(&nu.probs()[z]))
}

impl Sampler {
    /// Trials `start..start + len` of the configured stream.
    pub fn range(cfg: &SimConfig, start: u64, len: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_word_pos(4 * start as u128);
        let mut segments = vec![(0, outcome_cdfs(&cfg.nu))];
        segments.extend(cfg.drift.iter().map(|(s, nu)| (*s, outcome_cdfs(nu))));
        let seg = segments.iter().rposition(|(s, _)| *s <= start).unwrap_or(0);
        Self {
            rng,
            input_cdf: Cdf::new(cfg.inputs.probs()),
            segments,
            seg,
            next: start,
            end: start.saturating_add(len),
        }
    }
}

impl Iterator for Sampler {
    type Item = TrialRecord;

    #[inline]
    fn next(&mut self) -> Option<TrialRecord> {
        if self.next >= self.end {
            return None;
        }
        while self.seg + 1 < self.segments.len() && self.segments[self.seg + 1].0 <= self.next {
            self.seg += 1;
        }
        let z = self.input_cdf.draw(self.rng.next_u64());
        let c = self.segments[self.seg].1[z].draw(self.rng.next_u64());
        self.next += 1;
        Some(TrialRecord::from_cells(c, z))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.end - self.next) as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Sampler {}

/// The full configured stream: `z ~ inputs`, then `c ~ ν(·|z)`.
pub fn sample_trials(cfg: &SimConfig) -> Result<Sampler, SimError> {
    cfg.validate()?;
    Ok(Sampler::range(cfg, 0, cfg.n))
}

/// Selects a setting distribution from the bias polytope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BiasSchedule {
    /// One vertex, 0-based; vertex 0 favors `(x, y) = (0, 0)`.
    Vertex(usize),
    /// Convex weights over the four vertices.
    Mixture([f64; 4]),
}

/// The setting distribution selected by `schedule` at bias `eps_b`.
pub fn bias_distribution(eps_b: f64, schedule: BiasSchedule) -> Result<InputDistribution, SimError> {
    let poly = bias_vertices(eps_b)?;
    match schedule {
        BiasSchedule::Vertex(v) if v < 4 => Ok(poly.vertices[v]),
        BiasSchedule::Vertex(v) => Err(SimError::InvalidConfig(format!("bias vertex {v} out of range 0..4"))),
        BiasSchedule::Mixture(w) => Ok(InputDistribution::mixture(&poly.vertices, &w)?),
    }
}

/// `n` setting pairs drawn from the selected bias distribution, using the
/// same per-trial word layout as [`sample_trials`].
pub fn biased_inputs(eps_b: f64, schedule: BiasSchedule, n: u64, rng_seed: u64) -> Result<Vec<(u8, u8)>, SimError> {
    let cdf = Cdf::new(bias_distribution(eps_b, schedule)?.probs());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..n)
        .map(|_| {
            let z = cdf.draw(rng.next_u64());
            rng.next_u64();
            ((z & 1) as u8, (z >> 1) as u8)
        })
        .collect())
}

pub fn tally<I: IntoIterator<Item = TrialRecord>>(stream: I) -> CountTable {
    let mut t = CountTable::default();
    for r in stream {
        t.record(&r);
    }
    t
}

/// Stream whose tally is exactly `counts`, cells in `(z, c)` order.
pub fn replay_counts(counts: &CountTable) -> impl Iterator<Item = TrialRecord> + '_ {
    (0..4).flat_map(move |z| {
        (0..4).flat_map(move |c| std::iter::repeat_n(TrialRecord::from_cells(c, z), counts.counts[z][c] as usize))
    })
}

/// Stream whose tally is exactly `counts`, with the cells interleaved so that
/// every prefix holds each cell in proportion to its count, to within one.
pub fn interleave_counts(counts: &CountTable) -> impl Iterator<Item = TrialRecord> + '_ {
    let flat: [u64; 16] = std::array::from_fn(|i| counts.counts[i / 4][i % 4]);
    let total = flat.iter().sum::<u64>();
    let mut emitted = [0u64; 16];
    (1..=total).map(move |step| {
        // Largest deficit `count·step/total − emitted`, scaled by `total`.
        let j = (0..16)
            .filter(|&j| emitted[j] < flat[j])
            .max_by_key(|&j| {
                (
                    flat[j] as i128 * step as i128 - emitted[j] as i128 * total as i128,
                    std::cmp::Reverse(j),
                )
            })
            .expect("step never exceeds the total");
        emitted[j] += 1;
        TrialRecord::from_cells(j % 4, j / 4)
    })
}

/// Writes the BTR1 header for `count` trials.
pub fn write_header<W: Write>(w: &mut W, count: u64) -> Result<(), SimError> {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(TRIAL_FILE_MAGIC);
    h[4..6].copy_from_slice(&TRIAL_FILE_VERSION.to_le_bytes());
    h[8..16].copy_from_slice(&count.to_le_bytes());
    w.write_all(&h)?;
    Ok(())
}

pub fn write_trials<W: Write>(w: &mut W, trials: &[TrialRecord]) -> Result<(), SimError> {
    write_header(w, trials.len() as u64)?;
    let bytes: Vec<u8> = trials.iter().map(TrialRecord::to_byte).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a BTR1 file and returns its raw trial bytes, checking the header and
/// the trial count but not the bytes themselves.
pub fn read_trial_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, SimError> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)
        .map_err(|_| SimError::Format("file shorter than the 16-byte header".into()))?;
    if &h[..4] != TRIAL_FILE_MAGIC {
        return Err(SimError::Format(format!("not a BTR1 file (magic {:?})", &h[..4])));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != TRIAL_FILE_VERSION {
        return Err(SimError::Format(format!("unsupported version {version}")));
    }
    let flags = u16::from_le_bytes([h[6], h[7]]);
    if flags != 0 {
        return Err(SimError::Format(format!("unknown flags {flags:#x}")));
    }
    let count = u64::from_le_bytes(h[8..16].try_into().expect("8 bytes"));
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() as u64 != count {
        return Err(SimError::Format(format!(
            "header announces {count} trials, file holds {}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

pub fn read_trials<R: Read>(r: &mut R) -> Result<Vec<TrialRecord>, SimError> {
    read_trial_bytes(r)?
        .into_iter()
        .map(|b| TrialRecord::from_byte(b).map_err(SimError::from))
        .collect()
}

/// CSV with header `x,y,a,b`.
pub fn write_csv<W: Write>(w: W, trials: &[TrialRecord]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    for t in trials {
        out.serialize(t)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<TrialRecord>, SimError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let t: TrialRecord = row?;
        out.push(TrialRecord::new(t.x, t.y, t.a, t.b)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use proptest::prelude::*;

    fn instance1() -> ConditionalDistribution {
        ConditionalDistribution::from_approx(reference::CALIBRATED_DISTRIBUTIONS[0]).unwrap()
    }

    #[test]
    fn cdf_handles_zero_cells() {
        let cdf = Cdf::new(&[0.0, 1.0, 0.0, 0.0]);
        for u in [0, 1, u64::MAX / 2, u64::MAX] {
            assert_eq!(cdf.draw(u), 1);
        }
        let cdf = Cdf::new(&[0.5, 0.0, 0.5, 0.0]);
        assert_eq!(cdf.draw(0), 0);
        assert_eq!(cdf.draw(u64::MAX), 2);
        assert_eq!(cdf.draw(1 << 63), 2);
        assert_eq!(cdf.draw((1 << 63) - 1), 0);
    }

    #[test]
    fn deterministic_behavior_is_followed() {
        let nu = ConditionalDistribution::deterministic([0, 1], [1, 1]);
        let cfg = SimConfig::new(nu, InputDistribution::uniform(), 10_000, 3);
        for t in sample_trials(&cfg).unwrap() {
            assert_eq!((t.a, t.b), ([0, 1][t.x as usize], 1));
        }
    }

    #[test]
    fn frequencies_match_instance_one() {
        let nu = instance1();
        let n = 10_000_000u64;
        let cfg = SimConfig::new(nu, InputDistribution::uniform(), n, 2024);
        let counts = tally(sample_trials(&cfg).unwrap());
        assert_eq!(counts.total(), n);
        for z in 0..4 {
            let nz = counts.setting_totals()[z] as f64;
            let sd = (0.25 * 0.75 / n as f64).sqrt();
            assert!((nz / n as f64 - 0.25).abs() < 5.0 * sd, "z={z}");
            for c in 0..4 {
                let p = nu.get(c, z);
                let sd = (p * (1.0 - p) / nz).sqrt();
                let f = counts.get(c, z) as f64 / nz;
                assert!((f - p).abs() < 5.0 * sd, "z={z} c={c}: {f} vs {p}");
            }
        }
    }

    #[test]
    fn seeded_streams_repeat_and_split() {
        let cfg = SimConfig::new(instance1(), InputDistribution::uniform(), 5000, 77);
        let a: Vec<_> = sample_trials(&cfg).unwrap().collect();
        let b: Vec<_> = sample_trials(&cfg).unwrap().collect();
        assert_eq!(a, b);
        let mut parts = Vec::new();
        for (start, len) in [(0, 1), (1, 1234), (1235, 3000), (4235, 765)] {
            parts.extend(Sampler::range(&cfg, start, len));
        }
        assert_eq!(parts, a);
        let other = SimConfig { rng_seed: 78, ..cfg };
        assert_ne!(sample_trials(&other).unwrap().collect::<Vec<_>>(), a);
    }

    #[test]
    fn drift_switches_behavior() {
        let first = ConditionalDistribution::deterministic([0, 0], [0, 0]);
        let second = ConditionalDistribution::deterministic([1, 1], [1, 1]);
        let mut cfg = SimConfig::new(first, InputDistribution::uniform(), 200, 5);
        cfg.drift.push((120, second));
        let all: Vec<_> = sample_trials(&cfg).unwrap().collect();
        assert!(all[..120].iter().all(|t| t.a == 0 && t.b == 0));
        assert!(all[120..].iter().all(|t| t.a == 1 && t.b == 1));
        let tail: Vec<_> = Sampler::range(&cfg, 150, 50).collect();
        assert_eq!(tail, all[150..]);
        cfg.drift.push((100, first));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn biased_input_frequencies() {
        let n = 10_000_000u64;
        let sd = (0.25 * 0.75 / n as f64).sqrt();
        let unbiased = biased_inputs(0.0, BiasSchedule::Vertex(0), n, 1).unwrap();
        let x1 = unbiased.iter().filter(|(x, _)| *x == 1).count() as f64 / n as f64;
        assert!((x1 - 0.5).abs() < 5.0 * (0.25 / n as f64).sqrt());

        let biased = biased_inputs(1e-3, BiasSchedule::Vertex(0), n, 2).unwrap();
        let f00 = biased.iter().filter(|&&s| s == (0, 0)).count() as f64 / n as f64;
        assert!((f00 - 0.251001).abs() < 5.0 * sd, "{f00}");
        assert!((f00 - 0.25).abs() > 5.0 * sd);

        let degenerate = biased_inputs(0.5, BiasSchedule::Vertex(0), 1000, 3).unwrap();
        assert!(degenerate.iter().all(|&s| s == (0, 0)));

        assert!(biased_inputs(0.6, BiasSchedule::Vertex(0), 1, 0).is_err());
        assert!(biased_inputs(0.1, BiasSchedule::Vertex(4), 1, 0).is_err());
    }

    #[test]
    fn replayed_counts_tally_exactly() {
        assert_eq!(tally(std::iter::empty()), CountTable::default());
        let counts = CountTable::new(reference::ANALYSIS_COUNTS[0]);
        assert_eq!(tally(replay_counts(&counts)), counts);
    }

    #[test]
    fn interleaved_prefixes_stay_proportional() {
        let counts = CountTable::new([[3, 0, 1, 0], [0, 7, 0, 2], [1, 1, 1, 1], [0, 0, 0, 12]]);
        let stream: Vec<TrialRecord> = interleave_counts(&counts).collect();
        assert_eq!(tally(stream.iter().copied()), counts);
        let total = counts.total() as f64;
        let mut seen = CountTable::default();
        for (i, t) in stream.iter().enumerate() {
            seen.record(t);
            for z in 0..4 {
                for c in 0..4 {
                    let want = counts.get(c, z) as f64 * (i + 1) as f64 / total;
                    assert!(
                        (seen.get(c, z) as f64 - want).abs() < 1.0 + 1e-9,
                        "prefix {i} cell ({c}, {z})"
                    );
                }
            }
        }
        let big = CountTable::new(reference::ANALYSIS_COUNTS[0]);
        assert_eq!(tally(interleave_counts(&big).take(1_000_000)).total(), 1_000_000);
    }

    #[test]
    fn deviation_shrinks_like_inverse_root_n() {
        let nu = instance1();
        let joint = nu.joint(&InputDistribution::uniform());
        let mean_dev = |n: u64| {
            (0..8u64)
                .map(|seed| {
                    let cfg = SimConfig::new(nu, InputDistribution::uniform(), n, 1000 + seed);
                    let t = tally(sample_trials(&cfg).unwrap());
                    (0..16)
                        .map(|i| (t.counts[i / 4][i % 4] as f64 / n as f64 - joint[i / 4][i % 4]).abs())
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 8.0
        };
        let ratio = mean_dev(10_000) / mean_dev(1_000_000);
        assert!((4.0..25.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn trial_file_errors() {
        let mut buf = Vec::new();
        write_trials(&mut buf, &[TrialRecord::new(1, 0, 1, 1).unwrap()]).unwrap();
        assert_eq!(&buf[..4], b"BTR1");
        assert_eq!(buf.len(), 17);
        assert_eq!(buf[16], 0b1101);

        let mut bad = buf.clone();
        bad[0] = b'X';
        let err = read_trials(&mut bad.as_slice()).unwrap_err().to_string();
        assert!(err.contains("not a BTR1 file"), "{err}");
        let mut short = buf.clone();
        short.pop();
        assert!(read_trials(&mut short.as_slice()).is_err());
        let mut invalid = buf.clone();
        invalid[16] = 0x10;
        assert!(read_trials(&mut invalid.as_slice()).is_err());
        assert!(read_csv("x,y,a,b\n0,2,0,0\n".as_bytes()).is_err());
    }

    fn records() -> impl Strategy<Value = Vec<TrialRecord>> {
        prop::collection::vec(0u8..16, 0..300)
            .prop_map(|v| v.into_iter().map(|b| TrialRecord::from_byte(b).unwrap()).collect())
    }

    proptest! {
        #[test]
        fn trial_file_round_trip(trials in records()) {
            let mut buf = Vec::new();
            write_trials(&mut buf, &trials).unwrap();
            prop_assert_eq!(read_trials(&mut buf.as_slice()).unwrap(), trials.clone());
            let mut csv_buf = Vec::new();
            write_csv(&mut csv_buf, &trials).unwrap();
            prop_assert_eq!(read_csv(csv_buf.as_slice()).unwrap(), trials);
        }

        #[test]
        fn tally_is_additive(a in records(), b in records()) {
            let mut sum = tally(a.iter().copied());
            sum.merge(&tally(b.iter().copied()));
            prop_assert_eq!(tally(a.iter().chain(&b).copied()), sum);
        }

        #[test]
        fn bias_marginals_stay_in_range(eps in 0.0f64..0.5, v in 0usize..4, seed in 0u64..1000) {
            let n = 20_000;
            let draws = biased_inputs(eps, BiasSchedule::Vertex(v), n, seed).unwrap();
            let tol = 5.0 * (0.25 / n as f64).sqrt();
            let fx = draws.iter().filter(|s| s.0 == 0).count() as f64 / n as f64;
            let fy = draws.iter().filter(|s| s.1 == 0).count() as f64 / n as f64;
            for f in [fx, fy] {
                prop_assert!(f >= 0.5 - eps - tol && f <= 0.5 + eps + tol);
            }
        }
    }
}
