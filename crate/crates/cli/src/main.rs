//! `diqrand`: calibrate, plan, run and replay device-independent randomness
//! certification from CHSH trial data.
//!
//! Exit codes: 0 on success, 2 when a protocol instance fails to reach its
//! entropy threshold, 1 on usage, input or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result, bail};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use diqrand_core::bell::{ConditionalDistribution, InputDistribution, bias_vertices, chsh_value};
use diqrand_core::calibration::{CountTable, statistical_strength};
use diqrand_core::eat::{EatInputs, eat_report};
use diqrand_core::pef::{BetaSearchInputs, PefError, expected_log2, optimize_beta, optimize_pef_report, validate_pef};
use diqrand_core::pipeline::{
    self, InstanceOutcome, PefRecord, PipelineConfig, SeedSource, StopCheck, TrialSource, calibrate, extract_outputs,
    published_config, plan_instance, read_trial_file, replay_published, run_instance, run_sequence, trial_outputs,
    write_certificate,
};
use diqrand_core::protocol::plan_parameters;
use diqrand_core::reference;
use diqrand_core::simulator::{BiasSchedule, SimConfig, bias_distribution, sample_trials, write_csv, write_trials};

#[derive(Parser)]
#[command(
    name = "diqrand",
    version,
    about = "Device-independent randomness certification from CHSH trials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings that override the corresponding config fields.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Trials per subblock; also switches the stopping check to subblock boundaries.
    #[arg(long)]
    subblock_size: Option<u64>,
    /// Per-party setting bias bound.
    #[arg(long)]
    eps_b: Option<f64>,
    /// QEF scaling constant used during accumulation.
    #[arg(long)]
    f_max: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(b) = self.subblock_size {
            cfg.subblock_size = b;
            cfg.stop_check = StopCheck::Subblock;
        }
        if let Some(e) = self.eps_b {
            cfg.eps_b = e;
        }
        if let Some(f) = self.f_max {
            cfg.f_max = f;
        }
    }
}

#[derive(Args, Clone)]
struct RequestArgs {
    /// Output bits.
    #[arg(long, default_value_t = 512)]
    k: u32,
    /// Total error, as a number or `2^-64`.
    #[arg(long, default_value = "2^-64", value_parser = parse_real)]
    eps: f64,
    /// Fraction of the error assigned to smoothing.
    #[arg(long, default_value_t = 0.8)]
    split_sigma: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum-likelihood fit of the device behavior.
    Calibrate {
        /// Pipeline config; its calibration source is used.
        #[arg(long, conflicts_with_all = ["trials", "instance"])]
        config: Option<PathBuf>,
        /// BTR1 or CSV trial file.
        #[arg(long, conflicts_with = "instance")]
        trials: Option<PathBuf>,
        /// Published calibration counts of instance 1 to 5.
        #[arg(long)]
        instance: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy threshold and error split; with a config, also the power, PEF and trial budget.
    Plan {
        #[command(flatten)]
        request: RequestArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimal PEF for a behavior, at a given power or at the power minimizing the trial count.
    OptimizePef {
        /// Pipeline config; the behavior is calibrated from its calibration source.
        #[arg(long, conflicts_with = "instance")]
        config: Option<PathBuf>,
        /// Published calibrated behavior of instance 1 to 5.
        #[arg(long)]
        instance: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        eps_b: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One protocol instance: calibrate, plan, accumulate and extract.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Extractor seed, raw bits or hex.
        #[arg(long)]
        seed_file: Option<PathBuf>,
        /// Directory for certificate.json and extracted.hex.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Extract from the outputs of a trial file.
    Extract {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        seed_file: PathBuf,
        /// Trial budget n, giving input length 2n; defaults to the file's trial count.
        #[arg(long)]
        n_budget: Option<u64>,
        #[command(flatten)]
        request: RequestArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded simulated trials, written as BTR1 (or CSV for a `.csv` name).
    Simulate {
        /// Simulator config JSON; defaults to the instance's published behavior.
        #[arg(long, conflicts_with = "instance")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        instance: usize,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Draw settings from a vertex of the bias polytope with this bias.
        #[arg(long)]
        eps_b: Option<f64>,
        #[arg(long, default_value_t = 0, requires = "eps_b")]
        bias_vertex: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trials the entropy accumulation theorem needs for the same threshold.
    EatCompare {
        /// CHSH excess Î − 2; defaults to the two published values.
        #[arg(long)]
        excess: Vec<f64>,
        #[arg(long, default_value_t = reference::SIGMA as f64)]
        sigma: f64,
        #[arg(long, default_value = "0.8*2^-64", value_parser = parse_real)]
        eps_sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        /// Trial rates in Hz for the runtime estimate.
        #[arg(long, default_values_t = [1e5, 2e5])]
        rate: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replays the five published instances from the bundled tables.
    #[command(name = "replay-paper")]
    ReplayPublished {
        /// Replay only this instance (1 to 5).
        #[arg(long)]
        instance: Option<usize>,
        /// Search the power instead of using the published one.
        #[arg(long)]
        search_beta: bool,
        #[arg(long)]
        seed_file: Option<PathBuf>,
        /// Directory for the per-instance certificates.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequential instances over one trial stream, each calibrated on the data just before it.
    Full {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        #[arg(long, default_value_t = 600)]
        calibration_subblocks: u64,
        #[arg(long)]
        seed_file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// A real number, `2^e`, or a product of those joined by `*`.
fn parse_real(s: &str) -> std::result::Result<f64, String> {
    s.split('*')
        .map(|part| {
            let part = part.trim();
            match part.strip_prefix("2^") {
                Some(e) => e.parse::<f64>().map(|e| 2f64.powf(e)),
                None => part.parse::<f64>(),
            }
            .map_err(|e| format!("{part:?}: {e}"))
        })
        .product()
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn instance_index(i: usize) -> Result<usize> {
    if (1..=reference::INSTANCES).contains(&i) {
        Ok(i - 1)
    } else {
        bail!("instance must be between 1 and {}", reference::INSTANCES)
    }
}

fn load_config(path: &Path, seed_file: Option<&PathBuf>, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed_file {
        cfg.seed = SeedSource::File { path: s.clone() };
    }
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn write_outcome(o: &InstanceOutcome, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_certificate(&o.certificate, &dir.join(format!("{name}.json")))?;
    if let Some(bits) = &o.extracted {
        let path = dir.join(format!("{name}.extracted.hex"));
        std::fs::write(&path, bits.to_hex() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn summary(i: usize, o: &InstanceOutcome) -> serde_json::Value {
    let c = &o.certificate;
    json!({
        "instance": i,
        "success": c.success,
        "beta": c.planning.beta,
        "n_budget": c.params.n_budget,
        "n_act": c.accumulation.n_act,
        "entropy_rate": c.accumulation.entropy_rate,
        "certified_entropy": c.accumulation.certified_entropy,
        "p_fail_bound": c.planning.p_fail_bound,
        "extracted": c.extracted,
    })
}

/// Runs a command; `Ok(false)` signals a failed protocol instance.
fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Calibrate {
            config,
            trials,
            instance,
            out,
        } => {
            let src = match (config, trials, instance) {
                (Some(c), _, _) => PipelineConfig::load(&c)?.calibration,
                (_, Some(path), _) => TrialSource::File { path },
                (_, _, Some(i)) => TrialSource::Counts {
                    counts: CountTable::new(reference::CALIBRATION_COUNTS[instance_index(i)?]),
                },
                _ => bail!("one of --config, --trials or --instance is required"),
            };
            let cal = calibrate(&src)?;
            let strength = statistical_strength(&cal.nu, &InputDistribution::uniform())?;
            emit(
                &json!({
                    "trials": cal.counts.total(),
                    "counts": cal.counts,
                    "nu": cal.nu,
                    "chsh": chsh_value(&cal.nu),
                    "statistical_strength_bits": strength,
                    "kkt_residual": cal.kkt_residual,
                    "data_sha256": cal.data_sha256,
                }),
                out.as_deref(),
            )?;
        }
        Command::Plan {
            request,
            config,
            overrides,
            out,
        } => {
            let params = plan_parameters(request.k, request.eps, request.split_sigma)?;
            let Some(path) = config else {
                emit(&params, out.as_deref())?;
                return Ok(true);
            };
            let mut cfg = load_config(&path, None, &overrides)?;
            cfg.request = pipeline::Request {
                k: request.k,
                eps: request.eps,
                split_sigma: request.split_sigma,
            };
            let cal = calibrate(&cfg.calibration)?;
            let plan = plan_instance(&cfg, &cal.nu)?;
            emit(
                &json!({
                    "params": plan.params,
                    "beta": plan.pef.beta,
                    "beta_star": plan.beta_star,
                    "n_exp": plan.report.n_exp,
                    "n_budget": plan.report.n_budget,
                    "p_fail_bound": plan.report.p_fail_bound,
                    "expected_entropy_rate": plan.report.entropy_rate,
                    "pef": PefRecord::new(&plan.pef),
                }),
                out.as_deref(),
            )?;
        }
        Command::OptimizePef {
            config,
            instance,
            beta,
            eps_b,
            out,
        } => {
            let nu = match config {
                Some(c) => calibrate(&PipelineConfig::load(&c)?.calibration)?.nu,
                None => {
                    let i = instance_index(instance.unwrap_or(1))?;
                    ConditionalDistribution::from_approx(reference::CALIBRATED_DISTRIBUTIONS[i])?
                }
            };
            let eps_b = eps_b.unwrap_or(reference::EPS_B);
            let bias = bias_vertices(eps_b)?;
            let vertices = pipeline::tsirelson_vertices();
            let uniform = InputDistribution::uniform();
            let params = plan_parameters(512, reference::EPSILON, reference::SPLIT_SIGMA)?;
            let (pef, n_exp) = match beta {
                Some(b) => {
                    let o = match optimize_pef_report(&nu, &uniform, b, vertices, &bias) {
                        Ok(o) => o,
                        Err(PefError::NotConverged { best, .. }) => *best,
                        Err(e) => return Err(e.into()),
                    };
                    let n = diqrand_core::pef::expected_trials(
                        &o.pef,
                        &nu,
                        &uniform,
                        params.sigma as f64,
                        params.eps_sigma,
                    )
                    .ok();
                    (o.pef, n)
                }
                None => {
                    let inp = BetaSearchInputs {
                        nu: &nu,
                        input: &uniform,
                        vertices,
                        bias: &bias,
                        sigma: params.sigma as f64,
                        eps_sigma: params.eps_sigma,
                        f_max: 1.0,
                    };
                    let s = optimize_beta(&inp, diqrand_core::pef::BETA_RANGE)?;
                    (s.pef, Some(s.report.n_exp))
                }
            };
            emit(
                &json!({
                    "beta": pef.beta,
                    "eps_b": eps_b,
                    "expected_log2_per_trial": expected_log2(&pef, &nu, &uniform),
                    "n_exp": n_exp,
                    "constraint_max": validate_pef(&pef, vertices, &bias),
                    "pef": PefRecord::new(&pef),
                }),
                out.as_deref(),
            )?;
        }
        Command::Run {
            config,
            seed_file,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, seed_file.as_ref(), &overrides)?;
            let o = run_instance(&cfg)?;
            if let Some(dir) = &out {
                write_outcome(&o, dir, "certificate")?;
            }
            print!("{}", o.certificate.to_json()?);
            return Ok(o.run.success);
        }
        Command::Extract {
            trials,
            seed_file,
            n_budget,
            request,
            out,
        } => {
            let records = read_trial_file(&trials)?;
            let n = n_budget.unwrap_or(records.len() as u64);
            if (records.len() as u64) > n {
                bail!("{} trials exceed the budget {n}", records.len());
            }
            let params = plan_parameters(request.k, request.eps, request.split_sigma)?.with_budget(n);
            let (bits, header, seed_sha256) =
                extract_outputs(&trial_outputs(&records), &params, &SeedSource::File { path: seed_file })?;
            emit(
                &json!({ "extractor": header, "seed_sha256": seed_sha256, "extracted": bits.to_hex() }),
                out.as_deref(),
            )?;
        }
        Command::Simulate {
            config,
            instance,
            n,
            seed,
            eps_b,
            bias_vertex,
            out,
        } => {
            let mut cfg: SimConfig = match config {
                Some(c) => serde_json::from_str(
                    &std::fs::read_to_string(&c).with_context(|| format!("reading {}", c.display()))?,
                )?,
                None => SimConfig::new(
                    ConditionalDistribution::from_approx(
                        reference::CALIBRATED_DISTRIBUTIONS[instance_index(instance)?],
                    )?,
                    InputDistribution::uniform(),
                    1_000_000,
                    0,
                ),
            };
            if let Some(n) = n {
                cfg.n = n;
            }
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            if let Some(e) = eps_b {
                cfg.inputs = bias_distribution(e, BiasSchedule::Vertex(bias_vertex))?;
            }
            let trials: Vec<_> = sample_trials(&cfg)?.collect();
            let file = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = std::io::BufWriter::new(file);
            if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                write_csv(&mut w, &trials)?;
            } else {
                write_trials(&mut w, &trials)?;
            }
            eprintln!("wrote {} trials to {}", trials.len(), out.display());
        }
        Command::EatCompare {
            excess,
            sigma,
            eps_sigma,
            kappa,
            rate,
            out,
        } => {
            let excess = if excess.is_empty() {
                reference::EAT_CASES.iter().map(|c| c.0).collect()
            } else {
                excess
            };
            let reports = excess
                .iter()
                .map(|&x| {
                    eat_report(
                        &EatInputs {
                            i_hat: 2.0 + x,
                            sigma,
                            eps_sigma,
                            kappa,
                        },
                        &rate,
                    )
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            emit(&reports, out.as_deref())?;
        }
        Command::ReplayPublished {
            instance,
            search_beta,
            seed_file,
            out,
        } => {
            let seed = seed_file.map(|path| SeedSource::File { path });
            let outcomes: Vec<(usize, InstanceOutcome)> = match (instance, search_beta) {
                (None, false) => replay_published(seed.as_ref(), 0)
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| r.map(|o| (i + 1, o)))
                    .collect::<std::result::Result<_, _>>()?,
                _ => {
                    let which: Vec<usize> = match instance {
                        Some(i) => vec![instance_index(i)?],
                        None => (0..reference::INSTANCES).collect(),
                    };
                    which
                        .into_iter()
                        .map(|i| {
                            let s = seed.clone().unwrap_or(SeedSource::Prng { rng_seed: i as u64 });
                            let mut cfg = published_config(i, s);
                            if search_beta {
                                cfg.beta = None;
                            }
                            run_instance(&cfg).map(|o| (i + 1, o))
                        })
                        .collect::<std::result::Result<_, _>>()?
                }
            };
            if let Some(dir) = &out {
                for (i, o) in &outcomes {
                    write_outcome(o, dir, &format!("instance{i}"))?;
                }
            }
            let rows: Vec<_> = outcomes.iter().map(|(i, o)| summary(*i, o)).collect();
            emit(&rows, None)?;
            return Ok(outcomes.iter().all(|(_, o)| o.run.success));
        }
        Command::Full {
            config,
            instances,
            calibration_subblocks,
            seed_file,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, seed_file.as_ref(), &overrides)?;
            let outcomes = run_sequence(&cfg, instances, calibration_subblocks)?;
            if let Some(dir) = &out {
                for (i, o) in outcomes.iter().enumerate() {
                    write_outcome(o, dir, &format!("instance{}", i + 1))?;
                }
            }
            let rows: Vec<_> = outcomes.iter().enumerate().map(|(i, o)| summary(i + 1, o)).collect();
            emit(&rows, None)?;
            return Ok(outcomes.iter().all(|o| o.run.success));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
