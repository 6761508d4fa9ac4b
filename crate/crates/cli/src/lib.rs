//! Command-line front end for `iwkrr`.
//!
//! Every run writes its outputs and a `manifest.json` into `--out`. The
//! manifest holds the fully resolved configuration, so `rerun` can
//! reproduce the outputs byte for byte.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure,
//! 3 failed check suite.

pub mod commands;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use iwkrr::classify::ClassifyError;
use iwkrr::experiments::{
    ClassifySimConfig, ExperimentError, KernelChoice, RateStudyConfig, ScheduleSource, SimConfig, StrategyChoice,
};
use iwkrr::kernel::KernelError;
use iwkrr::oracle::OracleError;
use iwkrr::schedule::{RateParams, ScheduleError, DEFAULT_EPSILON, DEFAULT_MOMENT_ORDER};
use iwkrr::solver::SolveMethod;
use iwkrr::spectrum::SpectrumError;
use iwkrr::weights::{DiagnosticsConfig, WeightError};
use iwkrr::{DensityModel, SolveError, WeightStrategy};

use commands::{
    parse_kernel, CheckConfig, ClippingChoice, DiagnoseConfig, FitConfig, RunConfig, SampleSource, ScheduleConfig,
    SimRun, SpectrumConfig,
};
use output::{to_canonical_json, OutputDir};

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::IllConditioned { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SpectrumError> for CliError {
    fn from(e: SpectrumError) -> Self {
        match e {
            SpectrumError::NegativeEigenvalue { .. } | SpectrumError::NotPsd(_) | SpectrumError::InsufficientSpectrum { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Solve(s) => s.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Solve(s) => s.into(),
            ExperimentError::Oracle(o) => o.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}
validation_from!(KernelError, WeightError, ScheduleError, ClassifyError);

#[derive(Parser, Debug)]
#[command(name = "iwkrr", version, about = "Importance-weighted kernel ridge regression under covariate shift")]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with the subcommand's configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a CSV dataset (columns x1..xd, y).
    Fit(FitArgs),
    /// Covariate-shift regression simulations.
    Sim {
        #[command(subcommand)]
        which: SimCommand,
    },
    /// Learning curve against the theoretical rate.
    Rates(RatesArgs),
    /// Empirical kernel spectrum and effective dimension.
    Spectrum(SpectrumArgs),
    /// Regularization (and clipping) schedule table.
    Schedule(ScheduleArgs),
    /// Renyi divergences, moment and tail checks of a weight function.
    DiagnoseWeights(DiagnoseArgs),
    /// Shifted classification study with the excess-risk bound.
    ClassifySim(ClassifyArgs),
    /// Run a verification suite.
    Check(CheckArgs),
    /// Re-execute the run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// `gaussian:<lengthscale>`, `poly:<degree>,<offset>`, `linear` or `matern:<nu>,<lengthscale>`.
    #[arg(long)]
    kernel: Option<String>,
    /// Rescale the kernel so that k(x,x) <= 1 for |x| <= this bound.
    #[arg(long)]
    normalize: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// iw, uniform or clipped.
    #[arg(long)]
    weights: Option<String>,
    /// Training density, e.g. `normal:0,0.5` (mean, variance) or `uniform:-1,1`.
    #[arg(long)]
    train_dist: Option<String>,
    #[arg(long)]
    test_dist: Option<String>,
    /// Clipping threshold for `--weights clipped`.
    #[arg(long)]
    clip: Option<f64>,
    /// auto, dual or primal.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand, Debug)]
enum SimCommand {
    /// Gaussian kernel, target exp(-x^(-2k)), MSE over a lambda grid.
    Gaussian(SimArgs),
    /// Normalized polynomial kernels of several degrees at a fixed lambda.
    Poly(SimArgs),
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Score against noisy test labels.
    #[arg(long)]
    noisy_targets: bool,
    /// Comma-separated regularization values.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Comma-separated degrees (`sim poly`).
    #[arg(long, value_delimiter = ',')]
    degrees: Option<Vec<u32>>,
    /// Comma-separated strategies among iw, uniform.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long)]
    train_dist: Option<String>,
    #[arg(long)]
    test_dist: Option<String>,
    /// Also write figure-shaped CSVs.
    #[arg(long)]
    plotdata: bool,
}

#[derive(Args, Debug)]
struct RatesArgs {
    /// iw, uniform or clipped.
    #[arg(long)]
    strategy: Option<String>,
    /// theorem, grid or fixed.
    #[arg(long)]
    schedule: Option<String>,
    /// Regularization for `--schedule fixed`.
    #[arg(long)]
    lambda: Option<f64>,
    /// Schedule constant `c` (or `c1` when clipping).
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    /// Fixed clipping threshold instead of the schedule.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    normalize: Option<f64>,
    /// Sample points from this density (default `normal:0,0.5`).
    #[arg(long)]
    dist: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Read points from a CSV instead.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    /// Sample sizes, comma-separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long = "W")]
    w: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long = "E")]
    es: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// finite-rank or sobolev; overrides --s and --E.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    /// Clipped-weight schedule.
    #[arg(long)]
    clipped: bool,
    #[arg(long)]
    m: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    test_dist: Option<String>,
    #[arg(long)]
    train_dist: Option<String>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long = "W")]
    w: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    moments: Option<Vec<u32>>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// iw or uniform.
    #[arg(long)]
    strategy: Option<String>,
    /// Logistic label model P(y=1|x) = 1/(1+exp(-(slope x + shift))).
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    shift: Option<f64>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value = "oracle")]
    suite: String,
}

#[derive(Args, Debug)]
struct RerunArgs {
    manifest: PathBuf,
}

/// Written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub run: RunConfig,
    pub master_seed: u64,
    pub tool_version: String,
    /// Unix seconds; the only field allowed to differ between reruns.
    pub timestamp: u64,
    pub outputs: Vec<String>,
}

fn load_config<T: DeserializeOwned>(path: &Option<PathBuf>) -> Result<Option<T>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn density(s: &str) -> Result<DensityModel, CliError> {
    Ok(s.parse::<DensityModel>()?)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn strategy_choice(s: &str, clip: Option<f64>) -> Result<StrategyChoice, CliError> {
    Ok(match StrategyChoice::parse(s)? {
        StrategyChoice::Clipped { .. } => StrategyChoice::Clipped { threshold: clip },
        other => other,
    })
}

fn resolve_fit(a: FitArgs, config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let base: Option<FitConfig> = load_config(config)?;
    let data = match (a.data, &base) {
        (Some(p), _) => std::path::absolute(&p).map_err(|e| CliError::io(&p, e))?,
        (None, Some(b)) => b.data.clone(),
        (None, None) => return Err(CliError::Validation("fit needs --data".into())),
    };
    let mut kernel = match (&a.kernel, &base) {
        (Some(k), _) => parse_kernel(k)?,
        (None, Some(b)) => b.kernel.clone(),
        (None, None) => parse_kernel("gaussian:1")?,
    };
    if let Some(bound) = a.normalize {
        kernel = kernel.normalize(bound)?;
    }
    let lambda = a.lambda.or(base.as_ref().map(|b| b.lambda)).unwrap_or(1e-3);
    let strategy = match (&a.weights, &base) {
        (None, Some(b)) => b.strategy.clone(),
        (w, _) => {
            let w = w.as_deref().unwrap_or("uniform");
            let dists = || -> Result<(DensityModel, DensityModel), CliError> {
                let te = a.test_dist.as_deref().ok_or_else(|| CliError::Validation(format!("--weights {w} needs --test-dist")))?;
                let tr = a.train_dist.as_deref().ok_or_else(|| CliError::Validation(format!("--weights {w} needs --train-dist")))?;
                Ok((density(te)?, density(tr)?))
            };
            match w {
                "uniform" => WeightStrategy::Uniform,
                "iw" => {
                    let (te, tr) = dists()?;
                    WeightStrategy::true_iw(te, tr)
                }
                "clipped" => {
                    let (te, tr) = dists()?;
                    let d = a.clip.ok_or_else(|| CliError::Validation("--weights clipped needs --clip".into()))?;
                    WeightStrategy::clipped(WeightStrategy::true_iw(te, tr), d)?
                }
                other => return Err(CliError::Validation(format!("unknown weighting '{other}'"))),
            }
        }
    };
    let method = match a.method.as_deref() {
        None => base.as_ref().map(|b| b.method).unwrap_or_default(),
        Some("auto") => SolveMethod::Auto,
        Some("dual") => SolveMethod::Dual,
        Some("primal") => SolveMethod::Primal,
        Some(other) => return Err(CliError::Validation(format!("unknown method '{other}'"))),
    };
    Ok(RunConfig::Fit(FitConfig {
        data,
        kernel,
        lambda,
        strategy,
        method,
    }))
}

fn resolve_sim(poly: bool, a: SimArgs, seed: Option<u64>, config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let base: Option<SimRun> = load_config(config)?;
    let mut run = base.unwrap_or_else(|| SimRun {
        sim: if poly {
            SimConfig::polynomial()
        } else {
            SimConfig::gaussian(a.k.unwrap_or(1))
        },
        plotdata: false,
    });
    let c = &mut run.sim;
    if let Some(k) = a.k {
        c.target = iwkrr::experiments::TargetFunction::ExpPower { k };
    }
    set(&mut c.reps, a.reps);
    set(&mut c.n_train, a.n_train);
    set(&mut c.n_test, a.n_test);
    set(&mut c.noise_sd, a.noise_sd);
    set(&mut c.lambda_grid, a.lambda_grid);
    set(&mut c.master_seed, seed);
    c.noisy_targets |= a.noisy_targets;
    if let Some(d) = a.train_dist {
        c.train_dist = density(&d)?;
    }
    if let Some(d) = a.test_dist {
        c.test_dist = density(&d)?;
    }
    if let Some(s) = a.strategies {
        c.strategies = s.iter().map(|s| strategy_choice(s, None)).collect::<Result<_, _>>()?;
    }
    if let Some(degrees) = a.degrees {
        match &mut c.kernel {
            KernelChoice::Polynomial { degrees: d, .. } => *d = degrees,
            KernelChoice::Fixed { .. } => return Err(CliError::Validation("--degrees applies to `sim poly`".into())),
        }
    }
    run.plotdata |= a.plotdata;
    run.sim.validate()?;
    Ok(RunConfig::Sim(run))
}

fn resolve_rates(a: RatesArgs, seed: Option<u64>, config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut c: RateStudyConfig = load_config(config)?.unwrap_or_else(RateStudyConfig::finite_rank_default);
    if let Some(s) = &a.strategy {
        c.strategy = strategy_choice(s, a.clip)?;
        // clipping needs unbounded-weight constants; bounded weights also satisfy q = 1
        if matches!(c.strategy, StrategyChoice::Clipped { .. }) && config.is_none() {
            c.params.q = 1.0;
        }
    }
    if let Some(s) = &a.schedule {
        c.schedule = match s.as_str() {
            "theorem" => ScheduleSource::Theorem {
                c: a.c.or(Some(1.0)),
                c2: a.c2,
                m: DEFAULT_MOMENT_ORDER,
                epsilon: DEFAULT_EPSILON,
            },
            "grid" => ScheduleSource::GridMin {
                grid: iwkrr::experiments::default_lambda_grid(),
            },
            "fixed" => ScheduleSource::Fixed {
                lambda: a
                    .lambda
                    .ok_or_else(|| CliError::Validation("--schedule fixed needs --lambda".into()))?,
            },
            other => return Err(CliError::Validation(format!("unknown schedule '{other}'"))),
        };
    } else if let ScheduleSource::Theorem { c: cc, c2, .. } = &mut c.schedule {
        set(cc, a.c.map(Some));
        set(c2, a.c2.map(Some));
    }
    set(&mut c.n_grid, a.n_grid);
    set(&mut c.reps, a.reps);
    set(&mut c.n_test, a.n_test);
    set(&mut c.noise_sd, a.noise_sd);
    set(&mut c.master_seed, seed);
    c.validate()?;
    Ok(RunConfig::Rates(c))
}

fn resolve_spectrum(a: SpectrumArgs, seed: Option<u64>, config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut c: SpectrumConfig = match load_config(config)? {
        Some(c) => c,
        None => SpectrumConfig {
            kernel: parse_kernel("gaussian:1")?,
            source: SampleSource::Density {
                dist: density("normal:0,0.5")?,
                n: 500,
            },
            lambda_grid: commands::default_spectrum_grid(),
            seed: 0,
        },
    };
    if let Some(k) = &a.kernel {
        c.kernel = parse_kernel(k)?;
    }
    if let Some(b) = a.normalize {
        c.kernel = c.kernel.normalize(b)?;
    }
    if let Some(p) = a.data {
        c.source = SampleSource::Csv {
            path: std::path::absolute(&p).map_err(|e| CliError::io(&p, e))?,
        };
    } else if a.dist.is_some() || a.n.is_some() {
        let (mut dist, mut n) = match &c.source {
            SampleSource::Density { dist, n } => (dist.clone(), *n),
            SampleSource::Csv { .. } => (density("normal:0,0.5")?, 500),
        };
        if let Some(d) = &a.dist {
            dist = density(d)?;
        }
        set(&mut n, a.n);
        c.source = SampleSource::Density { dist, n };
    }
    set(&mut c.lambda_grid, a.lambda_grid);
    set(&mut c.seed, seed);
    Ok(RunConfig::Spectrum(c))
}

fn resolve_schedule(a: ScheduleArgs, config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut c: ScheduleConfig = load_config(config)?.unwrap_or(ScheduleConfig {
        params: RateParams::default(),
        n_grid: vec![100, 1000, 10_000],
        clipping: None,
        c: None,
        c2: None,
    });
    let p = &mut c.params;
    set(&mut p.r, a.r);
    set(&mut p.s, a.s);
    set(&mut p.q, a.q);
    set(&mut p.w, a.w);
    set(&mut p.sigma, a.sigma);
    set(&mut p.es, a.es);
    set(&mut p.delta, a.delta);
    match a.preset.as_deref() {
        None => {}
        Some("finite-rank") => {
            let rank = a.rank.ok_or_else(|| CliError::Validation("finite-rank preset needs --rank".into()))?;
            let fr = RateParams::finite_rank(p.r, p.q, rank);
            p.s = fr.s;
            p.es = fr.es;
        }
        Some("sobolev") => {
            let eta = a.eta.ok_or_else(|| CliError::Validation("sobolev preset needs --eta".into()))?;
            let sob = RateParams::sobolev(p.r, p.q, eta, a.dim.unwrap_or(1))?;
            p.s = sob.s;
            p.es = sob.es;
        }
        Some(other) => return Err(CliError::Validation(format!("unknown preset '{other}'"))),
    }
    set(&mut c.n_grid, a.n);
    if a.clipped || a.m.is_some() || a.epsilon.is_some() {
        let prev = c.clipping.unwrap_or(ClippingChoice {
            m: DEFAULT_MOMENT_ORDER,
            epsilon: DEFAULT_EPSILON,
        });
        c.clipping = Some(ClippingChoice {
            m: a.m.unwrap_or(prev.m),
            epsilon: a.epsilon.unwrap_or(prev.epsilon),
        });
    }
    set(&mut c.c, a.c.map(Some));
    set(&mut c.c2, a.c2.map(Some));
    c.params.validate()?;
    Ok(RunConfig::Schedule(c))
}

fn resolve_diagnose(a: DiagnoseArgs, seed: Option<u64>, config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut c: DiagnoseConfig = match load_config(config)? {
        Some(c) => c,
        None => DiagnoseConfig {
            test: iwkrr::experiments::default_test_dist(),
            train: iwkrr::experiments::default_train_dist(),
            diagnostics: DiagnosticsConfig::default(),
        },
    };
    if let Some(d) = &a.test_dist {
        c.test = density(d)?;
    }
    if let Some(d) = &a.train_dist {
        c.train = density(d)?;
    }
    let d = &mut c.diagnostics;
    set(&mut d.q, a.q);
    set(&mut d.w_const, a.w);
    set(&mut d.sigma, a.sigma);
    set(&mut d.sample_size, a.mc);
    set(&mut d.alphas, a.alphas);
    set(&mut d.ms, a.moments);
    set(&mut d.seed, seed);
    Ok(RunConfig::DiagnoseWeights(c))
}

fn resolve_classify(a: ClassifyArgs, seed: Option<u64>, config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut c: ClassifySimConfig = load_config(config)?.unwrap_or_default();
    set(&mut c.runs, a.runs);
    set(&mut c.n_train, a.n_train);
    set(&mut c.n_test, a.n_test);
    set(&mut c.lambda, a.lambda);
    if let Some(s) = &a.strategy {
        c.strategy = strategy_choice(s, None)?;
    }
    if a.slope.is_some() || a.shift.is_some() {
        let (slope, shift) = match c.label_model {
            iwkrr::classify::LabelModel::Logistic { slope, shift } => (slope, shift),
            _ => (3.0, -4.5),
        };
        c.label_model = iwkrr::classify::LabelModel::Logistic {
            slope: a.slope.unwrap_or(slope),
            shift: a.shift.unwrap_or(shift),
        };
    }
    set(&mut c.master_seed, seed);
    Ok(RunConfig::ClassifySim(c))
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Executes a resolved configuration and writes its manifest.
pub fn execute(run: &RunConfig, out_dir: &Path) -> Result<(commands::Outcome, Manifest), CliError> {
    let mut out = OutputDir::create(out_dir)?;
    let outcome = run.execute(&mut out)?;
    let manifest = Manifest {
        run: run.clone(),
        master_seed: run.master_seed(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: unix_seconds(),
        outputs: out.files().to_vec(),
    };
    let path = out.root().join("manifest.json");
    std::fs::write(&path, to_canonical_json(&manifest)?).map_err(|e| CliError::io(&path, e))?;
    Ok((outcome, manifest))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn resolve(cli: Cli) -> Result<Option<RunConfig>, CliError> {
    let seed = cli.seed;
    let cfg = &cli.config;
    Ok(Some(match cli.command {
        Command::Fit(a) => resolve_fit(a, cfg)?,
        Command::Sim { which } => match which {
            SimCommand::Gaussian(a) => resolve_sim(false, a, seed, cfg)?,
            SimCommand::Poly(a) => resolve_sim(true, a, seed, cfg)?,
        },
        Command::Rates(a) => resolve_rates(a, seed, cfg)?,
        Command::Spectrum(a) => resolve_spectrum(a, seed, cfg)?,
        Command::Schedule(a) => resolve_schedule(a, cfg)?,
        Command::DiagnoseWeights(a) => resolve_diagnose(a, seed, cfg)?,
        Command::ClassifySim(a) => resolve_classify(a, seed, cfg)?,
        Command::Check(a) => RunConfig::Check(CheckConfig {
            suite: a.suite,
            seed: seed.unwrap_or(0),
        }),
        Command::Rerun(a) => read_manifest(&a.manifest)?.run,
    }))
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return 1;
        }
        // a second build in the same process fails harmlessly
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let out_dir = cli.out.clone();
    let result = resolve(cli).and_then(|run| match run {
        Some(run) => execute(&run, &out_dir).map(|(o, _)| o),
        None => Ok(commands::Outcome::default()),
    });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            if outcome.check_failed {
                eprintln!("check suite failed");
                3
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
