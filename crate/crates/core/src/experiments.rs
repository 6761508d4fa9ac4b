//! Simulation studies: the two covariate-shift regression studies, learning
//! curves against theoretical rates, projection/bias studies and a
//! classification study.
//!
//! Every random draw comes from a stream keyed by the master seed and the
//! cell coordinates (experiment, sample size, repetition), so results are a
//! pure function of the configuration and do not depend on thread count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::classify::{
    empirical_risk, excess_risk_bound, margin_report, mean_and_se, sign_of_values, ClassifyError, LabelModel,
    MarginReport,
};
use crate::kernel::{KernelError, KernelSpec, Point};
use crate::oracle::{bias_term, projection, OracleError, Projection};
use crate::rng::{child_rng, label, Rng};
use crate::schedule::{clipped_schedule, iw_schedule, RateParams, ScheduleError};
use crate::solver::{mse, IwkrrProblem, FitOptions, SolveError, TrainingSet};
use crate::spectrum::{linear_fit, log_grid};
use crate::weights::{DensityModel, McEstimate, WeightError, WeightStrategy};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// `exp(-x^{-2k})`, extended by 0 at the origin.
pub fn regression_fn(k: u32, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    // x^{-2k} = exp(-2k ln|x|); overflow to inf gives exp(-inf) = 0
    (-(-2.0 * k as f64 * x.abs().ln()).exp()).exp()
}

/// Regression functions available to the studies (on the first coordinate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetFunction {
    /// `exp(-x^{-2k})`.
    ExpPower { k: u32 },
    /// `sum_j coefs[j] x^j`.
    Polynomial { coefs: Vec<f64> },
    /// `sin(freq x)`.
    Sine { freq: f64 },
}

impl TargetFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let t = x[0];
        match self {
            TargetFunction::ExpPower { k } => regression_fn(*k, t),
            TargetFunction::Polynomial { coefs } => coefs.iter().rev().fold(0.0, |acc, c| acc * t + c),
            TargetFunction::Sine { freq } => (freq * t).sin(),
        }
    }
}

/// Weighting choice, resolved against the study's train/test distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyChoice {
    Iw,
    Uniform,
    /// Clipped importance weights; a fixed threshold, or one scheduled with `n`.
    Clipped { threshold: Option<f64> },
}

impl StrategyChoice {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyChoice::Iw => "iw",
            StrategyChoice::Uniform => "uniform",
            StrategyChoice::Clipped { .. } => "clipped",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ExperimentError> {
        match s {
            "iw" => Ok(StrategyChoice::Iw),
            "uniform" => Ok(StrategyChoice::Uniform),
            "clipped" => Ok(StrategyChoice::Clipped { threshold: None }),
            other => Err(ExperimentError::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }

    /// Concrete strategy; `scheduled_threshold` fills in a missing clip level.
    pub fn resolve(
        &self,
        test: &DensityModel,
        train: &DensityModel,
        scheduled_threshold: Option<f64>,
    ) -> Result<WeightStrategy, ExperimentError> {
        let iw = WeightStrategy::true_iw(test.clone(), train.clone());
        Ok(match self {
            StrategyChoice::Iw => iw,
            StrategyChoice::Uniform => WeightStrategy::Uniform,
            StrategyChoice::Clipped { threshold } => {
                let t = threshold.or(scheduled_threshold).ok_or_else(|| {
                    ExperimentError::InvalidConfig("clipped strategy needs a threshold or a clipping schedule".into())
                })?;
                WeightStrategy::clipped(iw, t)?
            }
        })
    }
}

/// Kernel used by a regression study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelChoice {
    /// A fixed kernel, used as given.
    Fixed { spec: KernelSpec },
    /// `(x x' + offset)^degree` normalized to the 0.999 radius of the
    /// train/test mixture, one kernel per listed degree.
    Polynomial { degrees: Vec<u32>, offset: f64 },
}

/// Configuration of a regression simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub experiment: String,
    pub target: TargetFunction,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub train_dist: DensityModel,
    pub test_dist: DensityModel,
    pub kernel: KernelChoice,
    pub lambda_grid: Vec<f64>,
    pub strategies: Vec<StrategyChoice>,
    pub reps: usize,
    pub master_seed: u64,
    /// Score against noisy test labels instead of the noiseless regression function.
    #[serde(default)]
    pub noisy_targets: bool,
}

pub fn default_train_dist() -> DensityModel {
    DensityModel::gaussian(0.0, 0.5).expect("valid default")
}

pub fn default_test_dist() -> DensityModel {
    DensityModel::gaussian(1.5, 0.3).expect("valid default")
}

/// Fifteen log-spaced values in `[1e-6, 10]`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-6, 10.0, 15)
}

impl SimConfig {
    /// Gaussian-kernel study with unit lengthscale and target `exp(-x^{-2k})`.
    pub fn gaussian(k: u32) -> Self {
        Self {
            experiment: "gaussian".into(),
            target: TargetFunction::ExpPower { k },
            n_train: 200,
            n_test: 2000,
            noise_sd: 0.05,
            train_dist: default_train_dist(),
            test_dist: default_test_dist(),
            kernel: KernelChoice::Fixed {
                spec: KernelSpec::gaussian(1.0).expect("valid default"),
            },
            lambda_grid: default_lambda_grid(),
            strategies: vec![StrategyChoice::Iw, StrategyChoice::Uniform],
            reps: 100,
            master_seed: 0,
            noisy_targets: false,
        }
    }

    /// Polynomial-kernel study over degrees 1 to 7 at `lambda = 1`.
    pub fn polynomial() -> Self {
        Self {
            experiment: "poly".into(),
            target: TargetFunction::ExpPower { k: 1 },
            kernel: KernelChoice::Polynomial {
                degrees: (1..=7).collect(),
                offset: 1.0,
            },
            lambda_grid: vec![1.0],
            ..Self::gaussian(1)
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.to_string()));
        if self.n_train == 0 || self.n_test == 0 || self.reps == 0 {
            return bad("n_train, n_test and reps must be positive");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be finite and nonnegative");
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return bad("lambda grid must be nonempty and positive");
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required");
        }
        if let KernelChoice::Polynomial { degrees, offset } = &self.kernel {
            if degrees.is_empty() || degrees.contains(&0) || !(*offset >= 0.0) {
                return bad("polynomial degrees must be positive with a nonnegative offset");
            }
        }
        self.train_dist.validate()?;
        self.test_dist.validate()?;
        Ok(())
    }

    fn target_param(&self) -> u32 {
        match self.target {
            TargetFunction::ExpPower { k } => k,
            _ => 0,
        }
    }

    /// `(parameter reported as k_or_degree, kernel)` pairs of the study.
    pub fn kernels(&self) -> Result<Vec<(u32, KernelSpec)>, ExperimentError> {
        match &self.kernel {
            KernelChoice::Fixed { spec } => {
                spec.validate()?;
                Ok(vec![(self.target_param(), spec.clone())])
            }
            KernelChoice::Polynomial { degrees, offset } => {
                let bound = quantile_radius(&[self.train_dist.clone(), self.test_dist.clone()], 0.999)?;
                degrees
                    .iter()
                    .map(|&m| Ok((m, KernelSpec::polynomial(m, *offset)?.normalize(bound)?)))
                    .collect()
            }
        }
    }
}

/// Radius `r` with `P(|X| <= r) = prob` under the equal-weight mixture.
pub fn quantile_radius(dists: &[DensityModel], prob: f64) -> Result<f64, ExperimentError> {
    if dists.is_empty() || !(prob > 0.0 && prob < 1.0) {
        return Err(ExperimentError::InvalidConfig("quantile radius needs distributions and prob in (0,1)".into()));
    }
    let cdf = |r: f64| -> Result<f64, ExperimentError> {
        let mut total = 0.0;
        for d in dists {
            total += d
                .abs_cdf(r)
                .ok_or_else(|| ExperimentError::InvalidConfig("quantile radius needs univariate distributions".into()))?;
        }
        Ok(total / dists.len() as f64)
    };
    let mut hi = 1.0;
    while cdf(hi)? < prob {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid)? < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// One repetition's data.
#[derive(Clone, Debug, PartialEq)]
pub struct RepData {
    pub train: TrainingSet,
    pub test_xs: Vec<Point>,
    /// Regression function values, or noisy labels with `noisy_targets`.
    pub test_targets: Vec<f64>,
}

fn gaussian_noise(rng: &mut Rng, sd: f64, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// Draws repetition `rep` of a simulation: training inputs, their noisy
/// labels, then test inputs and targets, all from one stream.
pub fn sample_rep(config: &SimConfig, rep: usize) -> Result<RepData, ExperimentError> {
    let mut rng = child_rng(config.master_seed, &[label(&config.experiment), rep as u64]);
    let xs = config.train_dist.sample(config.n_train, &mut rng);
    let noise = gaussian_noise(&mut rng, config.noise_sd, config.n_train);
    let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| config.target.eval(x) + e).collect();
    let test_xs = config.test_dist.sample(config.n_test, &mut rng);
    let test_noise = gaussian_noise(&mut rng, config.noise_sd, config.n_test);
    let test_targets = test_xs
        .iter()
        .zip(&test_noise)
        .map(|(x, e)| config.target.eval(x) + if config.noisy_targets { *e } else { 0.0 })
        .collect();
    Ok(RepData {
        train: TrainingSet::new(xs, ys)?,
        test_xs,
        test_targets,
    })
}

/// Test MSE of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseRecord {
    pub experiment: String,
    pub strategy: String,
    pub k_or_degree: u32,
    pub lambda: f64,
    pub n: usize,
    pub rep: usize,
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mean over repetitions of one `(strategy, parameter, lambda, n)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub k_or_degree: u32,
    pub lambda: f64,
    pub n: usize,
    pub mean_mse: f64,
    pub stderr: f64,
    pub completed: usize,
    pub failed: usize,
}

/// Smallest mean MSE over the lambda grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinOverLambda {
    pub strategy: String,
    pub k_or_degree: u32,
    pub n: usize,
    pub lambda: f64,
    pub mean_mse: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub records: Vec<MseRecord>,
    pub summary: Vec<SummaryRow>,
    pub min_over_lambda: Vec<MinOverLambda>,
    pub master_seed: u64,
    /// Seed of each repetition's stream.
    pub rep_seeds: Vec<u64>,
}

impl ExperimentResult {
    fn from_records(experiment: &str, records: Vec<MseRecord>, master_seed: u64, reps: usize) -> Self {
        let summary = summarize(&records);
        let min_over_lambda = min_over_lambda(&summary);
        Self {
            experiment: experiment.to_string(),
            records,
            summary,
            min_over_lambda,
            master_seed,
            rep_seeds: (0..reps)
                .map(|r| crate::rng::derive_seed(master_seed, &[label(experiment), r as u64]))
                .collect(),
        }
    }

    pub fn min_mean(&self, strategy: &str, k_or_degree: u32) -> Option<&MinOverLambda> {
        self.min_over_lambda
            .iter()
            .find(|m| m.strategy == strategy && m.k_or_degree == k_or_degree)
    }

    pub fn mean_at(&self, strategy: &str, k_or_degree: u32, lambda: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.strategy == strategy && s.k_or_degree == k_or_degree && s.lambda == lambda)
    }

    /// Per-repetition minimum over the lambda grid of one strategy.
    pub fn per_rep_min(&self, strategy: &str, k_or_degree: u32) -> Vec<Option<f64>> {
        let reps = self.rep_seeds.len();
        let mut out = vec![None::<f64>; reps];
        for r in &self.records {
            if r.strategy == strategy && r.k_or_degree == k_or_degree {
                if let Some(m) = r.mse {
                    let slot = &mut out[r.rep];
                    *slot = Some(slot.map_or(m, |v| v.min(m)));
                }
            }
        }
        out
    }

    /// MSEs of one strategy at one lambda, indexed by repetition.
    pub fn per_rep_at(&self, strategy: &str, k_or_degree: u32, lambda: f64) -> Vec<Option<f64>> {
        let mut out = vec![None; self.rep_seeds.len()];
        for r in &self.records {
            if r.strategy == strategy && r.k_or_degree == k_or_degree && r.lambda == lambda {
                out[r.rep] = r.mse;
            }
        }
        out
    }
}

/// Paired comparison over repetitions: how often `a < b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub pairs: usize,
    pub wins: usize,
    pub fraction: f64,
    /// One-sided exact sign-test p-value for `a < b` more often than chance.
    pub sign_test_p: f64,
}

pub fn paired_comparison(a: &[Option<f64>], b: &[Option<f64>]) -> PairedComparison {
    let mut pairs = 0;
    let mut wins = 0;
    let mut ties = 0;
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            if x == y {
                ties += 1;
                continue;
            }
            pairs += 1;
            if x < y {
                wins += 1;
            }
        }
    }
    let _ = ties;
    PairedComparison {
        pairs,
        wins,
        fraction: if pairs > 0 { wins as f64 / pairs as f64 } else { 0.0 },
        sign_test_p: sign_test_p(wins, pairs),
    }
}

/// `P(X >= wins)` for `X ~ Binomial(pairs, 1/2)`.
pub fn sign_test_p(wins: usize, pairs: usize) -> f64 {
    if pairs == 0 {
        return 1.0;
    }
    if wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, pairs as u64).expect("valid binomial");
    (1.0 - b.cdf(wins as u64 - 1)).max(0.0)
}

fn summarize(records: &[MseRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, u32, u64, usize)> = records
        .iter()
        .map(|r| (r.strategy.clone(), r.k_or_degree, r.lambda.to_bits(), r.n))
        .collect();
    keys.sort_by(|a, b| {
        (&a.0, a.1, a.3)
            .cmp(&(&b.0, b.1, b.3))
            .then(f64::from_bits(a.2).total_cmp(&f64::from_bits(b.2)))
    });
    keys.dedup();
    keys.into_iter()
        .map(|(strategy, k, lbits, n)| {
            let lambda = f64::from_bits(lbits);
            let cell: Vec<&MseRecord> = records
                .iter()
                .filter(|r| r.strategy == strategy && r.k_or_degree == k && r.lambda == lambda && r.n == n)
                .collect();
            let vals: Vec<f64> = cell.iter().filter_map(|r| r.mse).collect();
            let est = if vals.is_empty() {
                McEstimate {
                    estimate: f64::NAN,
                    stderr: f64::NAN,
                }
            } else {
                mean_and_se(&vals)
            };
            SummaryRow {
                strategy,
                k_or_degree: k,
                lambda,
                n,
                mean_mse: est.estimate,
                stderr: est.stderr,
                completed: vals.len(),
                failed: cell.len() - vals.len(),
            }
        })
        .collect()
}

fn min_over_lambda(summary: &[SummaryRow]) -> Vec<MinOverLambda> {
    let mut out: Vec<MinOverLambda> = Vec::new();
    for row in summary.iter().filter(|r| r.mean_mse.is_finite()) {
        match out
            .iter_mut()
            .find(|m| m.strategy == row.strategy && m.k_or_degree == row.k_or_degree && m.n == row.n)
        {
            Some(m) if row.mean_mse < m.mean_mse => {
                m.lambda = row.lambda;
                m.mean_mse = row.mean_mse;
                m.stderr = row.stderr;
            }
            Some(_) => {}
            None => out.push(MinOverLambda {
                strategy: row.strategy.clone(),
                k_or_degree: row.k_or_degree,
                n: row.n,
                lambda: row.lambda,
                mean_mse: row.mean_mse,
                stderr: row.stderr,
            }),
        }
    }
    out
}

/// Predictions from a cross-kernel matrix restricted to the retained columns.
fn predict_cross(cross: &DMatrix<f64>, keep: &[usize], alpha: &[f64]) -> Vec<f64> {
    (0..cross.nrows())
        .map(|i| keep.iter().zip(alpha).map(|(&j, a)| cross[(i, j)] * a).sum())
        .collect()
}

/// Runs a regression simulation: every repetition, kernel, strategy and lambda.
///
/// Solver failures are recorded in the affected cells and do not abort the run.
pub fn run_sim(config: &SimConfig) -> Result<ExperimentResult, ExperimentError> {
    config.validate()?;
    let kernels = config.kernels()?;
    let strategies: Vec<(String, WeightStrategy)> = config
        .strategies
        .iter()
        .map(|s| Ok((s.name().to_string(), s.resolve(&config.test_dist, &config.train_dist, None)?)))
        .collect::<Result<_, ExperimentError>>()?;

    let per_rep: Vec<Result<Vec<MseRecord>, ExperimentError>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let data = sample_rep(config, rep)?;
            let mut out = Vec::new();
            for (param, kernel) in &kernels {
                let gram = kernel.gram(&data.train.xs, &data.train.xs)?.entries;
                let cross = kernel.cross_matrix(&data.test_xs, &data.train.xs);
                for (name, strategy) in &strategies {
                    let weights = strategy.eval_all(&data.train.xs)?;
                    let keep: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
                    let problem =
                        IwkrrProblem::with_gram(kernel, &data.train, &weights, Some(&gram), FitOptions::dual());
                    for &lambda in &config.lambda_grid {
                        let outcome = problem
                            .as_ref()
                            .map_err(|e| e.clone())
                            .and_then(|p| p.solve(lambda))
                            .map(|fit| mse(&predict_cross(&cross, &keep, &fit.alpha), &data.test_targets));
                        out.push(MseRecord {
                            experiment: config.experiment.clone(),
                            strategy: name.clone(),
                            k_or_degree: *param,
                            lambda,
                            n: config.n_train,
                            rep,
                            mse: outcome.as_ref().ok().copied(),
                            error: outcome.err().map(|e| e.to_string()),
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_rep {
        records.extend(r?);
    }
    Ok(ExperimentResult::from_records(&config.experiment, records, config.master_seed, config.reps))
}

/// Gaussian-kernel study for target parameter `k`.
pub fn run_gaussian_sim(k: u32, reps: usize, master_seed: u64) -> Result<ExperimentResult, ExperimentError> {
    run_sim(&SimConfig {
        reps,
        master_seed,
        ..SimConfig::gaussian(k)
    })
}

/// Polynomial-kernel study over `degrees` at a fixed `lambda`.
pub fn run_polynomial_sim(
    degrees: &[u32],
    lambda: f64,
    reps: usize,
    master_seed: u64,
) -> Result<ExperimentResult, ExperimentError> {
    run_sim(&SimConfig {
        kernel: KernelChoice::Polynomial {
            degrees: degrees.to_vec(),
            offset: 1.0,
        },
        lambda_grid: vec![lambda],
        reps,
        master_seed,
        ..SimConfig::polynomial()
    })
}

/// Where each sample size's regularization comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSource {
    /// `lambda = c n^{-beta}` from the rate parameters; `c` (and `c2` for
    /// clipping) default to their lower bounds.
    Theorem {
        c: Option<f64>,
        #[serde(default)]
        c2: Option<f64>,
        #[serde(default = "default_m")]
        m: u32,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
    Fixed { lambda: f64 },
    /// Best mean MSE over a grid, chosen separately at each `n`.
    GridMin { grid: Vec<f64> },
}

fn default_m() -> u32 {
    crate::schedule::DEFAULT_MOMENT_ORDER
}

fn default_eps() -> f64 {
    crate::schedule::DEFAULT_EPSILON
}

/// Learning-curve study configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStudyConfig {
    pub kernel: KernelSpec,
    pub target: TargetFunction,
    pub train_dist: DensityModel,
    pub test_dist: DensityModel,
    pub noise_sd: f64,
    pub strategy: StrategyChoice,
    pub n_grid: Vec<usize>,
    pub n_test: usize,
    pub schedule: ScheduleSource,
    pub params: RateParams,
    pub reps: usize,
    pub master_seed: u64,
}

impl RateStudyConfig {
    /// Linear kernel, `f(x) = x`, training on `U(-1, 1)` and testing on
    /// `U(0, 1)`. The weights are 2 on `[0, 1]` and 0 elsewhere, so they are
    /// bounded (`q = 0` with `W = sigma^2 = 2`) and the kernel has rank one
    /// (`s = 0`, `E_0 = 1`). Theory predicts MSE slope `-1`.
    pub fn finite_rank_default() -> Self {
        Self {
            kernel: KernelSpec::linear(),
            target: TargetFunction::Polynomial { coefs: vec![0.0, 1.0] },
            train_dist: DensityModel::uniform(-1.0, 1.0).expect("valid"),
            test_dist: DensityModel::uniform(0.0, 1.0).expect("valid"),
            noise_sd: 0.5,
            strategy: StrategyChoice::Iw,
            n_grid: (0..7).map(|i| 100 << i).collect(),
            n_test: 2000,
            schedule: ScheduleSource::Theorem {
                c: Some(1.0),
                c2: None,
                m: default_m(),
                epsilon: default_eps(),
            },
            params: RateParams {
                r: 0.5,
                s: 0.0,
                q: 0.0,
                w: 2.0,
                sigma: 2f64.sqrt(),
                es: 1.0,
                ..RateParams::default()
            },
            reps: 50,
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.n_grid.len() < 4 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) || self.n_grid[0] == 0 {
            return Err(ExperimentError::InvalidConfig(
                "n grid needs at least 4 increasing positive sizes".into(),
            ));
        }
        if self.reps == 0 || self.n_test == 0 {
            return Err(ExperimentError::InvalidConfig("reps and n_test must be positive".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(ExperimentError::InvalidConfig("noise_sd must be nonnegative".into()));
        }
        self.kernel.validate()?;
        self.params.validate()?;
        Ok(())
    }

    /// Theoretical MSE exponent `2 r beta` of the configured schedule.
    pub fn theoretical_exponent(&self) -> Result<f64, ExperimentError> {
        let rate = match (&self.strategy, &self.schedule) {
            (StrategyChoice::Clipped { threshold: None }, ScheduleSource::Theorem { m, epsilon, .. }) => {
                clipped_schedule(&self.params, *m, *epsilon, 1, None, None)?.rate
            }
            _ => crate::schedule::rate_exponent(&self.params),
        };
        Ok(2.0 * rate)
    }
}

/// One sample size of a rate study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub lambda: f64,
    pub threshold: Option<f64>,
    pub mean_mse: f64,
    pub stderr: f64,
    pub completed: usize,
    pub failed: usize,
    /// `lambda <= 1` (and the clipped side condition) for theorem schedules.
    pub feasible: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStudyResult {
    pub strategy: String,
    pub rows: Vec<RateRow>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Expected slope `-2 r beta`.
    pub theoretical_slope: f64,
    /// Sample sizes left out of the fit because every repetition failed.
    pub excluded: Vec<usize>,
    pub records: Vec<MseRecord>,
}

fn rate_cell(
    config: &RateStudyConfig,
    n: usize,
    rep: usize,
    lambdas: &[f64],
    threshold: Option<f64>,
) -> Result<Vec<Result<f64, String>>, ExperimentError> {
    let mut rng = child_rng(config.master_seed, &[label("rates"), n as u64, rep as u64]);
    let xs = config.train_dist.sample(n, &mut rng);
    let noise = gaussian_noise(&mut rng, config.noise_sd, n);
    let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| config.target.eval(x) + e).collect();
    let test_xs = config.test_dist.sample(config.n_test, &mut rng);
    let targets: Vec<f64> = test_xs.iter().map(|x| config.target.eval(x)).collect();
    let data = TrainingSet::new(xs, ys)?;
    let strategy = config.strategy.resolve(&config.test_dist, &config.train_dist, threshold)?;
    let weights = strategy.eval_all(&data.xs)?;
    let problem = match IwkrrProblem::new(&config.kernel, &data, &weights, FitOptions::default()) {
        Ok(p) => p,
        Err(e) => return Ok(lambdas.iter().map(|_| Err(e.to_string())).collect()),
    };
    Ok(lambdas
        .iter()
        .map(|&l| {
            problem
                .solve(l)
                .map(|fit| mse(&fit.predict(&test_xs), &targets))
                .map_err(|e| e.to_string())
        })
        .collect())
}

/// Learning curve: mean test MSE at each `n`, and its log-log slope.
pub fn run_rate_study(config: &RateStudyConfig) -> Result<RateStudyResult, ExperimentError> {
    config.validate()?;
    let strategy_name = config.strategy.name().to_string();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &n in &config.n_grid {
        let (lambdas, threshold, feasible) = match &config.schedule {
            ScheduleSource::Theorem { c, c2, m, epsilon } => match config.strategy {
                StrategyChoice::Clipped { threshold: None } => {
                    let s = clipped_schedule(&config.params, *m, *epsilon, n, *c, *c2)?;
                    (vec![s.lambda], s.d_at(n), Some(s.feasible && s.side_condition == Some(true)))
                }
                _ => {
                    let s = iw_schedule(&config.params, n, *c)?;
                    (vec![s.lambda], None, Some(s.feasible))
                }
            },
            ScheduleSource::Fixed { lambda } => (vec![*lambda], None, None),
            ScheduleSource::GridMin { grid } => (grid.clone(), None, None),
        };
        if lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(ExperimentError::InvalidConfig("regularization must be positive".into()));
        }
        let cells: Vec<Vec<Result<f64, String>>> = (0..config.reps)
            .into_par_iter()
            .map(|rep| rate_cell(config, n, rep, &lambdas, threshold))
            .collect::<Result<_, _>>()?;
        // mean per lambda, then the best lambda for this n
        let mut best: Option<RateRow> = None;
        for (li, &lambda) in lambdas.iter().enumerate() {
            let vals: Vec<f64> = cells.iter().filter_map(|c| c[li].as_ref().ok().copied()).collect();
            let failed = config.reps - vals.len();
            for (rep, c) in cells.iter().enumerate() {
                records.push(MseRecord {
                    experiment: "rates".into(),
                    strategy: strategy_name.clone(),
                    k_or_degree: 0,
                    lambda,
                    n,
                    rep,
                    mse: c[li].as_ref().ok().copied(),
                    error: c[li].as_ref().err().cloned(),
                });
            }
            let est = if vals.is_empty() {
                McEstimate {
                    estimate: f64::NAN,
                    stderr: f64::NAN,
                }
            } else {
                mean_and_se(&vals)
            };
            let row = RateRow {
                n,
                lambda,
                threshold,
                mean_mse: est.estimate,
                stderr: est.stderr,
                completed: vals.len(),
                failed,
                feasible,
            };
            let better = match &best {
                None => true,
                Some(b) => !b.mean_mse.is_finite() || (row.mean_mse.is_finite() && row.mean_mse < b.mean_mse),
            };
            if better {
                best = Some(row);
            }
        }
        rows.push(best.expect("at least one lambda"));
    }
    let excluded: Vec<usize> = rows.iter().filter(|r| r.completed == 0).map(|r| r.n).collect();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.completed > 0 && r.mean_mse > 0.0)
        .map(|r| ((r.n as f64).ln(), r.mean_mse.ln()))
        .collect();
    let (slope, intercept, r_squared) = if pts.len() >= 2 {
        linear_fit(&pts)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(RateStudyResult {
        strategy: strategy_name,
        rows,
        slope,
        intercept,
        r_squared,
        theoretical_slope: -config.theoretical_exponent()?,
        excluded,
        records,
    })
}

/// Misspecified explicit-feature setup for projection studies: the target
/// is outside the feature span, so the limit of the fit depends on the
/// weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStudyConfig {
    pub kernel: KernelSpec,
    pub target: TargetFunction,
    pub train_dist: DensityModel,
    pub test_dist: DensityModel,
    pub noise_sd: f64,
    pub n: usize,
    pub lambda: f64,
    pub n_test: usize,
    pub mc_size: usize,
    pub reps: usize,
    pub master_seed: u64,
}

impl ProjectionStudyConfig {
    /// Quadratic target with affine features; `U(-1, 1)` to `U(0, 1)` shift.
    pub fn misspecified_default() -> Self {
        Self {
            kernel: KernelSpec::polynomial(1, 1.0).expect("valid"),
            target: TargetFunction::Polynomial {
                coefs: vec![0.0, 0.0, 1.0],
            },
            train_dist: DensityModel::uniform(-1.0, 1.0).expect("valid"),
            test_dist: DensityModel::uniform(0.0, 1.0).expect("valid"),
            noise_sd: 0.1,
            n: 3200,
            lambda: 1e-4,
            n_test: 2000,
            mc_size: 100_000,
            reps: 50,
            master_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStudyResult {
    /// `|f'_H - f_H|` with `rho' = rho_tr`, in `L2(rho_te)`.
    pub bias: McEstimate,
    /// Per repetition, `L2(rho_te)` distance of the weighted and unweighted
    /// fits to the test-distribution projection.
    pub iw_distance: Vec<f64>,
    pub uniform_distance: Vec<f64>,
    /// Fraction of repetitions in which the weighted fit is closer.
    pub iw_closer_fraction: f64,
    pub f_h_test: Projection,
}

pub fn run_projection_study(config: &ProjectionStudyConfig) -> Result<ProjectionStudyResult, ExperimentError> {
    let fm = config
        .kernel
        .feature_map(config.train_dist.dim())
        .ok_or_else(|| ExperimentError::InvalidConfig("projection study needs an explicit feature map".into()))?;
    let target = config.target.clone();
    let f = move |x: &[f64]| target.eval(x);
    let seed = config.master_seed;
    let bias = bias_term(&fm, &f, &config.train_dist, &config.test_dist, config.mc_size, seed)?;
    let f_h = projection(&fm, &f, &config.test_dist, config.mc_size, crate::rng::derive_seed(seed, &[label("f_h")]))?;

    let iw = WeightStrategy::true_iw(config.test_dist.clone(), config.train_dist.clone());
    let dists: Vec<(f64, f64)> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = child_rng(seed, &[label("projection"), rep as u64]);
            let xs = config.train_dist.sample(config.n, &mut rng);
            let noise = gaussian_noise(&mut rng, config.noise_sd, config.n);
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| config.target.eval(x) + e).collect();
            let test_xs = config.test_dist.sample(config.n_test, &mut rng);
            let reference: Vec<f64> = test_xs.iter().map(|x| f_h.eval(&fm, x)).collect();
            let data = TrainingSet::new(xs, ys)?;
            let dist = |weights: &[f64]| -> Result<f64, ExperimentError> {
                let fit = IwkrrProblem::new(&config.kernel, &data, weights, FitOptions::default())?.solve(config.lambda)?;
                Ok(mse(&fit.predict(&test_xs), &reference).sqrt())
            };
            let w = iw.eval_all(&data.xs)?;
            Ok((dist(&w)?, dist(&vec![1.0; config.n])?))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let closer = dists.iter().filter(|(a, b)| a < b).count();
    Ok(ProjectionStudyResult {
        bias,
        iw_distance: dists.iter().map(|d| d.0).collect(),
        uniform_distance: dists.iter().map(|d| d.1).collect(),
        iw_closer_fraction: closer as f64 / config.reps as f64,
        f_h_test: f_h,
    })
}

/// Shifted binary classification with logistic labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifySimConfig {
    pub label_model: LabelModel,
    pub kernel: KernelSpec,
    pub train_dist: DensityModel,
    pub test_dist: DensityModel,
    pub strategy: StrategyChoice,
    pub n_train: usize,
    pub n_test: usize,
    pub lambda: f64,
    pub runs: usize,
    pub margin_grid: Vec<f64>,
    pub margin_mc: usize,
    pub master_seed: u64,
}

impl Default for ClassifySimConfig {
    fn default() -> Self {
        Self {
            label_model: LabelModel::Logistic { slope: 3.0, shift: -4.5 },
            kernel: KernelSpec::gaussian(1.0).expect("valid"),
            train_dist: default_train_dist(),
            test_dist: default_test_dist(),
            strategy: StrategyChoice::Iw,
            n_train: 300,
            n_test: 20_000,
            lambda: 1e-3,
            runs: 20,
            margin_grid: log_grid(0.01, 1.0, 12),
            margin_mc: 100_000,
            master_seed: 0,
        }
    }
}

/// One run of the classification study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRun {
    pub run: usize,
    /// Monte-Carlo `|f - f_rho|` in `L2(rho_te)`.
    pub l2_distance: f64,
    pub risk: f64,
    pub bayes_classifier_risk: f64,
    /// Paired difference of the two empirical risks on shared labels.
    pub excess_risk: f64,
    pub excess_stderr: f64,
    pub bound: f64,
    /// `excess <= bound + 3 stderr`.
    pub within_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifySimResult {
    pub margin: MarginReport,
    pub runs: Vec<ClassifyRun>,
}

pub fn run_classify_sim(config: &ClassifySimConfig) -> Result<ClassifySimResult, ExperimentError> {
    config.label_model.validate()?;
    if config.runs == 0 || config.n_train == 0 || config.n_test == 0 {
        return Err(ExperimentError::InvalidConfig("runs, n_train and n_test must be positive".into()));
    }
    let model = config.label_model;
    let f_rho = move |x: &[f64]| model.f_rho(x);
    let margin = margin_report(
        &f_rho,
        &config.test_dist,
        &config.margin_grid,
        config.margin_mc,
        crate::rng::derive_seed(config.master_seed, &[label("margin")]),
    )?;
    // a degenerate margin means no mass near the boundary: the bound holds with l -> inf
    let (alpha, c_alpha) = match (margin.alpha, margin.c_alpha) {
        (Some(a), Some(c)) => (a, c),
        _ => (0.0, 1.0),
    };
    let strategy = config.strategy.resolve(&config.test_dist, &config.train_dist, None)?;
    let runs: Vec<ClassifyRun> = (0..config.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = child_rng(config.master_seed, &[label("classify"), run as u64]);
            let xs = config.train_dist.sample(config.n_train, &mut rng);
            let labels = model.sample_labels(&xs, &mut rng);
            let test_xs = config.test_dist.sample(config.n_test, &mut rng);
            let test_labels = model.sample_labels(&test_xs, &mut rng);
            let data = TrainingSet::new(xs, labels.iter().map(|&l| l as f64).collect())?;
            let weights = strategy.eval_all(&data.xs)?;
            let fit = IwkrrProblem::new(&config.kernel, &data, &weights, FitOptions::default())?.solve(config.lambda)?;
            let preds = fit.predict(&test_xs);
            let truth: Vec<f64> = test_xs.iter().map(|x| f_rho(x)).collect();
            let l2_distance = mse(&preds, &truth).sqrt();
            let ours = sign_of_values(&preds);
            let bayes = sign_of_values(&truth);
            let risk = empirical_risk(&ours, &test_labels)?;
            let bayes_risk = empirical_risk(&bayes, &test_labels)?;
            let diffs: Vec<f64> = (0..test_labels.len())
                .map(|i| {
                    let a = (ours[i] != test_labels[i]) as u8 as f64;
                    let b = (bayes[i] != test_labels[i]) as u8 as f64;
                    a - b
                })
                .collect();
            let excess = mean_and_se(&diffs);
            let bound = excess_risk_bound(l2_distance, alpha, c_alpha)?;
            Ok(ClassifyRun {
                run,
                l2_distance,
                risk,
                bayes_classifier_risk: bayes_risk,
                excess_risk: risk - bayes_risk,
                excess_stderr: excess.stderr,
                bound,
                within_bound: risk - bayes_risk <= bound + 3.0 * excess.stderr,
            })
        })
        .collect::<Result<_, ExperimentError>>()?;
    Ok(ClassifySimResult { margin, runs })
}

/// Rows for an MSE-versus-lambda figure: `(strategy, k, lambda, mean, stderr)`.
pub fn lambda_curve_rows(result: &ExperimentResult) -> Vec<(String, u32, f64, f64, f64)> {
    result
        .summary
        .iter()
        .map(|s| (s.strategy.clone(), s.k_or_degree, s.lambda, s.mean_mse, s.stderr))
        .collect()
}

/// Rows for an MSE-versus-degree figure: `(strategy, degree, mean, stderr)`.
pub fn degree_curve_rows(result: &ExperimentResult) -> Vec<(String, u32, f64, f64)> {
    result
        .min_over_lambda
        .iter()
        .map(|m| (m.strategy.clone(), m.k_or_degree, m.mean_mse, m.stderr))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{fit_iwkrr, test_mse};

    #[test]
    fn regression_fn_examples() {
        for k in [1, 5, 25] {
            assert!((regression_fn(k, 1.0) - (-1f64).exp()).abs() < 1e-15);
            assert!((regression_fn(k, -1.0) - (-1f64).exp()).abs() < 1e-15);
        }
        assert_eq!(regression_fn(3, 0.0), 0.0);
        // exp(-u) = 1 - u + u^2/2 - ... with u = 1.2^{-50} ~ 1.1e-4
        let u = 1.2f64.powi(-50);
        let series = 1.0 - u + u * u / 2.0 - u * u * u / 6.0;
        assert!((regression_fn(25, 1.2) - series).abs() < 1e-15);
        assert_eq!(regression_fn(25, 0.5), 0.0);
        assert!(regression_fn(1, 1e-200) == 0.0);
    }

    #[test]
    fn quantile_radius_matches_mixture() {
        let dists = [default_train_dist(), default_test_dist()];
        let r = quantile_radius(&dists, 0.999).unwrap();
        let mass = 0.5 * (dists[0].abs_cdf(r).unwrap() + dists[1].abs_cdf(r).unwrap());
        assert!((mass - 0.999).abs() < 1e-12);
        assert!(r > 2.0 && r < 4.0);
    }

    #[test]
    fn single_cell_matches_hand_pipeline() {
        let config = SimConfig {
            reps: 1,
            lambda_grid: vec![1e-3],
            strategies: vec![StrategyChoice::Uniform],
            n_test: 300,
            master_seed: 17,
            ..SimConfig::gaussian(1)
        };
        let res = run_sim(&config).unwrap();
        assert_eq!(res.records.len(), 1);
        let data = sample_rep(&config, 0).unwrap();
        let k = KernelSpec::gaussian(1.0).unwrap();
        let fit = fit_iwkrr(&k, &data.train, &WeightStrategy::Uniform, 1e-3, FitOptions::dual()).unwrap();
        let expect = test_mse(&fit, &data.test_xs, &data.test_targets).unwrap();
        let got = res.records[0].mse.unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn polynomial_degree_seven_matches_hand_pipeline() {
        let res = run_polynomial_sim(&[7], 1.0, 1, 3).unwrap();
        let config = SimConfig {
            reps: 1,
            master_seed: 3,
            kernel: KernelChoice::Polynomial {
                degrees: vec![7],
                offset: 1.0,
            },
            ..SimConfig::polynomial()
        };
        let data = sample_rep(&config, 0).unwrap();
        let bound = quantile_radius(&[default_train_dist(), default_test_dist()], 0.999).unwrap();
        let k = KernelSpec::polynomial(7, 1.0).unwrap().normalize(bound).unwrap();
        for strat in [
            WeightStrategy::true_iw(default_test_dist(), default_train_dist()),
            WeightStrategy::Uniform,
        ] {
            let fit = fit_iwkrr(&k, &data.train, &strat, 1.0, FitOptions::dual()).unwrap();
            let expect = test_mse(&fit, &data.test_xs, &data.test_targets).unwrap();
            let got = res.per_rep_at(&strat.name(), 7, 1.0)[0].unwrap();
            assert!((got - expect).abs() <= 1e-10 * expect, "{got} vs {expect}");
        }
    }

    #[test]
    fn noiseless_smooth_target_is_learned() {
        let config = SimConfig {
            reps: 1,
            n_train: 2000,
            n_test: 500,
            noise_sd: 0.0,
            lambda_grid: vec![1e-6],
            strategies: vec![StrategyChoice::Iw],
            ..SimConfig::gaussian(1)
        };
        let res = run_sim(&config).unwrap();
        let m = res.records[0].mse.unwrap();
        assert!(m < 1e-3, "mse {m}");
    }

    #[test]
    fn runs_are_deterministic_and_reps_independent() {
        let config = SimConfig {
            reps: 3,
            n_test: 200,
            lambda_grid: vec![1e-2, 1.0],
            master_seed: 5,
            ..SimConfig::gaussian(25)
        };
        let a = run_sim(&config).unwrap();
        let b = run_sim(&config).unwrap();
        assert_eq!(a, b);
        let fewer = run_sim(&SimConfig { reps: 2, ..config.clone() }).unwrap();
        for r in &fewer.records {
            let same = a
                .records
                .iter()
                .find(|x| x.rep == r.rep && x.strategy == r.strategy && x.lambda == r.lambda)
                .unwrap();
            assert_eq!(same.mse, r.mse);
        }
        assert!(a.records.iter().all(|r| r.mse.is_some_and(|m| m.is_finite() && m >= 0.0)));
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(10, 10) - 0.5f64.powi(10)).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 10), 1.0);
        assert!((sign_test_p(5, 10) - 0.623046875).abs() < 1e-12);
        let c = paired_comparison(&[Some(1.0), Some(2.0), None], &[Some(2.0), Some(1.0), Some(0.0)]);
        assert_eq!((c.pairs, c.wins), (2, 1));
    }

    #[test]
    fn noiseless_well_specified_plateau() {
        let config = RateStudyConfig {
            noise_sd: 0.0,
            schedule: ScheduleSource::Fixed { lambda: 1e-10 },
            reps: 3,
            n_grid: vec![500, 1000, 2000, 4000],
            ..RateStudyConfig::finite_rank_default()
        };
        let res = run_rate_study(&config).unwrap();
        assert!(res.rows.iter().all(|r| r.mean_mse < 1e-6));
    }

    #[test]
    fn grid_min_picks_best_lambda() {
        let config = RateStudyConfig {
            schedule: ScheduleSource::GridMin {
                grid: vec![1e-4, 1e-2, 10.0],
            },
            reps: 5,
            n_grid: vec![100, 200, 400, 800],
            ..RateStudyConfig::finite_rank_default()
        };
        let res = run_rate_study(&config).unwrap();
        for row in &res.rows {
            let cell: Vec<&MseRecord> = res.records.iter().filter(|r| r.n == row.n).collect();
            for l in [1e-4, 1e-2, 10.0] {
                let vals: Vec<f64> = cell.iter().filter(|r| r.lambda == l).filter_map(|r| r.mse).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!(row.mean_mse <= mean + 1e-15);
            }
        }
        assert!(run_rate_study(&RateStudyConfig {
            n_grid: vec![100, 200, 400],
            ..config
        })
        .is_err());
    }

    #[test]
    fn classification_runs_respect_bound() {
        let res = run_classify_sim(&ClassifySimConfig {
            runs: 3,
            n_test: 5000,
            margin_mc: 20_000,
            ..ClassifySimConfig::default()
        })
        .unwrap();
        assert!(!res.margin.degenerate);
        for r in &res.runs {
            assert!(r.within_bound, "{r:?}");
        }
    }
}
