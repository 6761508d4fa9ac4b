//! Resolved configurations and executors for each subcommand.
//!
//! A subcommand is executed from its configuration alone, which is what
//! makes a manifest sufficient to reproduce a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use iwkrr::experiments::{
    degree_curve_rows, lambda_curve_rows, paired_comparison, run_classify_sim, run_rate_study, run_sim,
    ClassifySimConfig, ExperimentResult, KernelChoice, PairedComparison, RateStudyConfig, SimConfig,
};
use iwkrr::oracle::{oracle_suite, CheckOutcome};
use iwkrr::rng::{derive_seed, label, rng_from_seed};
use iwkrr::schedule::{clipped_schedule, iw_schedule, RateParams, Schedule};
use iwkrr::solver::{fit_iwkrr, FitOptions, SolveMethod};
use iwkrr::spectrum::{log_grid, spectrum_report};
use iwkrr::weights::{diagnose, DiagnosticsConfig};
use iwkrr::{DensityModel, KernelSpec, Point, TrainingSet, WeightStrategy};

use crate::output::{num, opt_bool, opt_num, OutputDir};
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// CSV with columns `x1..xd, y`.
    pub data: PathBuf,
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub strategy: WeightStrategy,
    #[serde(default)]
    pub method: SolveMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub sim: SimConfig,
    #[serde(default)]
    pub plotdata: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSource {
    /// Draw `n` points from a density.
    Density { dist: DensityModel, n: usize },
    /// Read points from a CSV whose columns are all coordinates.
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub kernel: KernelSpec,
    pub source: SampleSource,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClippingChoice {
    pub m: u32,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub params: RateParams,
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub clipping: Option<ClippingChoice>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub c2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub test: DensityModel,
    pub train: DensityModel,
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub suite: String,
    pub seed: u64,
}

/// Everything needed to execute one subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "config", rename_all = "kebab-case")]
pub enum RunConfig {
    Fit(FitConfig),
    Sim(SimRun),
    Rates(RateStudyConfig),
    Spectrum(SpectrumConfig),
    Schedule(ScheduleConfig),
    DiagnoseWeights(DiagnoseConfig),
    ClassifySim(ClassifySimConfig),
    Check(CheckConfig),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Fit(_) => "fit",
            RunConfig::Sim(_) => "sim",
            RunConfig::Rates(_) => "rates",
            RunConfig::Spectrum(_) => "spectrum",
            RunConfig::Schedule(_) => "schedule",
            RunConfig::DiagnoseWeights(_) => "diagnose-weights",
            RunConfig::ClassifySim(_) => "classify-sim",
            RunConfig::Check(_) => "check",
        }
    }

    pub fn master_seed(&self) -> u64 {
        match self {
            RunConfig::Fit(_) | RunConfig::Schedule(_) => 0,
            RunConfig::Sim(s) => s.sim.master_seed,
            RunConfig::Rates(r) => r.master_seed,
            RunConfig::Spectrum(s) => s.seed,
            RunConfig::DiagnoseWeights(d) => d.diagnostics.seed,
            RunConfig::ClassifySim(c) => c.master_seed,
            RunConfig::Check(c) => c.seed,
        }
    }

    /// Runs the subcommand, writing its outputs into `out`.
    pub fn execute(&self, out: &mut OutputDir) -> Result<Outcome, CliError> {
        match self {
            RunConfig::Fit(c) => exec_fit(c, out),
            RunConfig::Sim(c) => exec_sim(c, out),
            RunConfig::Rates(c) => exec_rates(c, out),
            RunConfig::Spectrum(c) => exec_spectrum(c, out),
            RunConfig::Schedule(c) => exec_schedule(c, out),
            RunConfig::DiagnoseWeights(c) => exec_diagnose(c, out),
            RunConfig::ClassifySim(c) => exec_classify(c, out),
            RunConfig::Check(c) => exec_check(c, out),
        }
    }
}

/// What a run reports back to the terminal.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    /// Set when a check suite ran and something failed.
    pub check_failed: bool,
}

impl Outcome {
    fn text(stdout: String) -> Self {
        Self {
            stdout,
            check_failed: false,
        }
    }
}

/// Parses `gaussian:1`, `poly:3,1`, `linear` or `matern:1.5,1`.
pub fn parse_kernel(s: &str) -> Result<KernelSpec, CliError> {
    let bad = || CliError::Validation(format!("cannot parse kernel '{s}'"));
    let (family, rest) = match s.split_once(':') {
        Some((f, r)) => (f.trim(), r),
        None => (s.trim(), ""),
    };
    let nums: Vec<f64> = if rest.trim().is_empty() {
        Vec::new()
    } else {
        rest.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    let spec = match (family, nums.as_slice()) {
        ("gaussian" | "rbf", [l]) => KernelSpec::gaussian(*l),
        ("poly" | "polynomial", [m, c]) if m.fract() == 0.0 && *m >= 1.0 => KernelSpec::polynomial(*m as u32, *c),
        ("linear", []) => Ok(KernelSpec::linear()),
        ("matern", [nu, l]) => KernelSpec::matern(*nu, *l),
        _ => return Err(bad()),
    };
    Ok(spec?)
}

fn read_points_csv(path: &Path, with_label: bool) -> Result<(Vec<Point>, Vec<f64>), CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Validation(format!("{}: row {} is not numeric", path.display(), i + 1)))?;
        let need = if with_label { 2 } else { 1 };
        if vals.len() < need {
            return Err(CliError::Validation(format!("{}: row {} has too few columns", path.display(), i + 1)));
        }
        if with_label {
            let (x, y) = vals.split_at(vals.len() - 1);
            xs.push(x.to_vec());
            ys.push(y[0]);
        } else {
            xs.push(vals);
        }
    }
    if xs.is_empty() {
        return Err(CliError::Validation(format!("{}: no data rows", path.display())));
    }
    Ok((xs, ys))
}

fn exec_fit(c: &FitConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let (xs, ys) = read_points_csv(&c.data, true)?;
    let data = TrainingSet::new(xs, ys)?;
    let options = FitOptions {
        method: c.method,
        ..FitOptions::default()
    };
    let model = fit_iwkrr(&c.kernel, &data, &c.strategy, c.lambda, options)?;
    out.json("model.json", &model)?;
    Ok(Outcome::text(format!(
        "fitted {} support points ({} zero-weight points dropped), lambda = {}\n",
        model.support.len(),
        model.dropped_zero_weight_count,
        model.lambda
    )))
}

const RESULT_HEADER: [&str; 7] = ["experiment", "strategy", "k_or_degree", "lambda", "n", "rep", "mse"];

fn record_rows(records: &[iwkrr::experiments::MseRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|r| {
            vec![
                r.experiment.clone(),
                r.strategy.clone(),
                r.k_or_degree.to_string(),
                num(r.lambda),
                r.n.to_string(),
                r.rep.to_string(),
                opt_num(r.mse),
            ]
        })
        .collect()
}

#[derive(Serialize)]
struct PairedRow {
    k_or_degree: u32,
    /// `None` compares per-repetition minima over the lambda grid.
    lambda: Option<f64>,
    iw_vs_uniform: PairedComparison,
}

#[derive(Serialize)]
struct SimSummary<'a> {
    experiment: &'a str,
    master_seed: u64,
    rep_seeds: &'a [u64],
    summary: &'a [iwkrr::experiments::SummaryRow],
    min_over_lambda: &'a [iwkrr::experiments::MinOverLambda],
    paired: Vec<PairedRow>,
    failed_cells: usize,
}

fn paired_rows(result: &ExperimentResult) -> Vec<PairedRow> {
    let mut params: Vec<u32> = result.summary.iter().map(|s| s.k_or_degree).collect();
    params.dedup();
    let has = |name: &str| result.summary.iter().any(|s| s.strategy == name);
    if !(has("iw") && has("uniform")) {
        return Vec::new();
    }
    let mut lambdas: Vec<f64> = result.summary.iter().map(|s| s.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut rows = Vec::new();
    for &p in &params {
        rows.push(PairedRow {
            k_or_degree: p,
            lambda: None,
            iw_vs_uniform: paired_comparison(&result.per_rep_min("iw", p), &result.per_rep_min("uniform", p)),
        });
        if lambdas.len() > 1 {
            for &l in &lambdas {
                rows.push(PairedRow {
                    k_or_degree: p,
                    lambda: Some(l),
                    iw_vs_uniform: paired_comparison(&result.per_rep_at("iw", p, l), &result.per_rep_at("uniform", p, l)),
                });
            }
        }
    }
    rows
}

fn exec_sim(c: &SimRun, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let result = run_sim(&c.sim)?;
    let failed = result.records.iter().filter(|r| r.mse.is_none()).count();
    out.csv("results.csv", &RESULT_HEADER, &record_rows(&result.records))?;
    out.json(
        "summary.json",
        &SimSummary {
            experiment: &result.experiment,
            master_seed: result.master_seed,
            rep_seeds: &result.rep_seeds,
            summary: &result.summary,
            min_over_lambda: &result.min_over_lambda,
            paired: paired_rows(&result),
            failed_cells: failed,
        },
    )?;
    if c.plotdata {
        match c.sim.kernel {
            KernelChoice::Fixed { .. } => {
                let rows: Vec<Vec<String>> = lambda_curve_rows(&result)
                    .into_iter()
                    .map(|(s, k, l, m, se)| vec![s, k.to_string(), num(l), num(m), num(se)])
                    .collect();
                out.csv("plot_mse_vs_lambda.csv", &["strategy", "k", "lambda", "mean_mse", "stderr"], &rows)?;
            }
            KernelChoice::Polynomial { .. } => {
                let rows: Vec<Vec<String>> = degree_curve_rows(&result)
                    .into_iter()
                    .map(|(s, d, m, se)| vec![s, d.to_string(), num(m), num(se)])
                    .collect();
                out.csv("plot_mse_vs_degree.csv", &["strategy", "degree", "mean_mse", "stderr"], &rows)?;
            }
        }
    }
    let mut text = String::new();
    for m in &result.min_over_lambda {
        text.push_str(&format!(
            "{} k_or_degree={} best lambda={} mean mse={:.6e} (se {:.2e})\n",
            m.strategy, m.k_or_degree, m.lambda, m.mean_mse, m.stderr
        ));
    }
    if failed > 0 {
        eprintln!("warning: {failed} cells failed to solve; see results.csv");
    }
    Ok(Outcome::text(text))
}

fn exec_rates(c: &RateStudyConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let result = run_rate_study(c)?;
    out.csv("results.csv", &RESULT_HEADER, &record_rows(&result.records))?;
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                num(r.lambda),
                opt_num(r.threshold),
                num(r.mean_mse),
                num(r.stderr),
                r.completed.to_string(),
                r.failed.to_string(),
                opt_bool(r.feasible),
            ]
        })
        .collect();
    out.csv(
        "rates.csv",
        &["n", "lambda", "threshold", "mean_mse", "stderr", "completed", "failed", "feasible"],
        &rows,
    )?;
    #[derive(Serialize)]
    struct Summary<'a> {
        strategy: &'a str,
        slope: f64,
        intercept: f64,
        r_squared: f64,
        theoretical_slope: f64,
        excluded: &'a [usize],
        rows: &'a [iwkrr::experiments::RateRow],
        master_seed: u64,
    }
    out.json(
        "summary.json",
        &Summary {
            strategy: &result.strategy,
            slope: result.slope,
            intercept: result.intercept,
            r_squared: result.r_squared,
            theoretical_slope: result.theoretical_slope,
            excluded: &result.excluded,
            rows: &result.rows,
            master_seed: c.master_seed,
        },
    )?;
    Ok(Outcome::text(format!(
        "{}: fitted slope {:.4} (r^2 {:.4}), theoretical {:.4}\n",
        result.strategy, result.slope, result.r_squared, result.theoretical_slope
    )))
}

fn exec_spectrum(c: &SpectrumConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let xs = match &c.source {
        SampleSource::Density { dist, n } => {
            if *n == 0 {
                return Err(CliError::Validation("sample size must be positive".into()));
            }
            let mut rng = rng_from_seed(derive_seed(c.seed, &[label("spectrum")]));
            dist.sample(*n, &mut rng)
        }
        SampleSource::Csv { path } => read_points_csv(path, false)?.0,
    };
    if c.lambda_grid.iter().any(|l| !(*l > 0.0)) {
        return Err(CliError::Validation("lambda grid must be positive".into()));
    }
    let report = spectrum_report(&c.kernel, &xs, &c.lambda_grid)?;
    out.json("spectrum.json", &report)?;
    let eig_rows: Vec<Vec<String>> = report
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, e)| vec![(i + 1).to_string(), num(*e)])
        .collect();
    out.csv("eigenvalues.csv", &["index", "eigenvalue"], &eig_rows)?;
    let nd_rows: Vec<Vec<String>> = report
        .eff_dim_curve
        .iter()
        .map(|(l, d)| vec![num(*l), num(*d)])
        .collect();
    out.csv("effective_dimension.csv", &["lambda", "effective_dimension"], &nd_rows)?;
    Ok(Outcome::text(format!(
        "{} eigenvalues, trace {:.6}, s_hat {:.4}, E_s {:.4}\n",
        report.eigenvalues.len(),
        report.eigenvalues.iter().sum::<f64>(),
        report.s_hat,
        report.es_hat
    )))
}

fn exec_schedule(c: &ScheduleConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    if c.n_grid.is_empty() {
        return Err(CliError::Validation("need at least one sample size".into()));
    }
    let schedules: Vec<Schedule> = c
        .n_grid
        .iter()
        .map(|&n| match c.clipping {
            Some(ClippingChoice { m, epsilon }) => clipped_schedule(&c.params, m, epsilon, n, c.c, c.c2),
            None => iw_schedule(&c.params, n, c.c),
        })
        .collect::<Result<_, _>>()?;
    let header = ["n", "beta", "rate", "c", "lambda", "tau", "d", "feasible", "side_condition"];
    let rows: Vec<Vec<String>> = schedules
        .iter()
        .map(|s| {
            vec![
                s.n.to_string(),
                num(s.beta),
                num(s.rate),
                num(s.c),
                num(s.lambda),
                opt_num(s.clipping.map(|k| k.tau)),
                opt_num(s.d_at(s.n)),
                s.feasible.to_string(),
                opt_bool(s.side_condition),
            ]
        })
        .collect();
    out.csv("schedule.csv", &header, &rows)?;
    out.json("schedule.json", &schedules)?;
    let mut text = header.join(",");
    text.push('\n');
    for r in &rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    Ok(Outcome::text(text))
}

fn exec_diagnose(c: &DiagnoseConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let d = diagnose(&c.test, &c.train, &c.diagnostics)?;
    out.json("diagnostics.json", &d)?;
    let mut rows = vec![vec![
        "sup_weight".to_string(),
        String::new(),
        num(d.sup_estimate),
        String::new(),
        String::new(),
        String::new(),
    ]];
    for p in &d.renyi_curve {
        rows.push(vec![
            "renyi_divergence".into(),
            num(p.alpha),
            num(p.estimate.estimate),
            num(p.estimate.stderr),
            String::new(),
            String::new(),
        ]);
    }
    for m in &d.moment_table {
        rows.push(vec![
            "weight_moment".into(),
            m.m.to_string(),
            num(m.lhs),
            num(m.stderr),
            num(m.rhs),
            m.satisfied.to_string(),
        ]);
    }
    for t in &d.tail_curve {
        rows.push(vec![
            "tail_mass".into(),
            num(t.t),
            num(t.empirical),
            num(t.stderr),
            num(t.bound),
            t.satisfied.to_string(),
        ]);
    }
    out.csv(
        "diagnostics.csv",
        &["quantity", "parameter", "estimate", "stderr", "bound", "satisfied"],
        &rows,
    )?;
    let failing = d.moment_table.iter().filter(|m| !m.satisfied).count() + d.tail_curve.iter().filter(|t| !t.satisfied).count();
    Ok(Outcome::text(format!(
        "sup weight estimate {:.4e}; {} of {} moment/tail checks fail\n",
        d.sup_estimate,
        failing,
        d.moment_table.len() + d.tail_curve.len()
    )))
}

fn exec_classify(c: &ClassifySimConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let res = run_classify_sim(c)?;
    let rows: Vec<Vec<String>> = res
        .runs
        .iter()
        .map(|r| {
            vec![
                r.run.to_string(),
                num(r.l2_distance),
                num(r.risk),
                num(r.bayes_classifier_risk),
                num(r.excess_risk),
                num(r.excess_stderr),
                num(r.bound),
                r.within_bound.to_string(),
            ]
        })
        .collect();
    out.csv(
        "classify.csv",
        &["run", "l2_distance", "risk", "bayes_risk", "excess_risk", "excess_stderr", "bound", "within_bound"],
        &rows,
    )?;
    let margin_rows: Vec<Vec<String>> = res.margin.grid.iter().map(|(d, m)| vec![num(*d), num(*m)]).collect();
    out.csv("margin.csv", &["delta", "mass"], &margin_rows)?;
    out.json("summary.json", &res)?;
    let ok = res.runs.iter().filter(|r| r.within_bound).count();
    Ok(Outcome::text(format!(
        "{ok} of {} runs within the excess-risk bound (alpha {:?}, c_alpha {:?})\n",
        res.runs.len(),
        res.margin.alpha,
        res.margin.c_alpha
    )))
}

fn exec_check(c: &CheckConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let outcomes: Vec<CheckOutcome> = match c.suite.as_str() {
        "oracle" => oracle_suite(c.seed)?,
        other => return Err(CliError::Validation(format!("unknown check suite '{other}'"))),
    };
    out.json("check.json", &outcomes)?;
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&format!("[{}] {}: {}\n", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail));
    }
    Ok(Outcome {
        stdout: text,
        check_failed: outcomes.iter().any(|o| !o.passed),
    })
}

pub fn default_spectrum_grid() -> Vec<f64> {
    log_grid(1e-6, 1.0, 25)
}
