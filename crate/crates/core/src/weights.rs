//! Weighting strategies and Monte-Carlo diagnostics of the weight function.
//!
//! Weights are ratios of known analytic densities. The diagnostics estimate
//! the Renyi divergence, the moment condition
//! `(E_te[w^{(m-1)/q}])^q <= m! W^{m-2} sigma^2 / 2`, and its sufficient tail
//! condition `2 P_te(w >= t) <= sigma^2 exp(-t^{1/q} / W)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
use thiserror::Error;

use crate::kernel::Point;
use crate::rng::{rng_from_seed, Rng};

/// Training density below this value counts as outside the support.
pub const PDF_FLOOR: f64 = 1e-300;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum WeightError {
    #[error("training density vanishes at {x:?} (pdf = {pdf:e}); weight undefined")]
    SupportViolation { x: Vec<f64>, pdf: f64 },
    #[error("invalid density parameters: {0}")]
    InvalidDensity(String),
    #[error("clipping threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("invalid diagnostic parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: density is {expected}-dimensional, point has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// A probability density with closed-form pdf and seeded sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DensityModel {
    /// Univariate normal parametrized by mean and *variance*.
    Gaussian1d { mean: f64, variance: f64 },
    /// Product of independent normals (diagonal covariance).
    GaussianNd { mean: Vec<f64>, variance: Vec<f64> },
    /// Uniform on `[lo, hi]`.
    UniformInterval { lo: f64, hi: f64 },
}

impl DensityModel {
    pub fn gaussian(mean: f64, variance: f64) -> Result<Self, WeightError> {
        let d = DensityModel::Gaussian1d { mean, variance };
        d.validate()?;
        Ok(d)
    }

    /// Normal with the second parameter read as a standard deviation.
    pub fn gaussian_sd(mean: f64, sd: f64) -> Result<Self, WeightError> {
        Self::gaussian(mean, sd * sd)
    }

    pub fn gaussian_nd(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, WeightError> {
        let d = DensityModel::GaussianNd { mean, variance };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self, WeightError> {
        let d = DensityModel::UniformInterval { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), WeightError> {
        let bad = |msg: String| Err(WeightError::InvalidDensity(msg));
        match self {
            DensityModel::Gaussian1d { mean, variance } => {
                if !mean.is_finite() || !(*variance > 0.0 && variance.is_finite()) {
                    return bad(format!("normal(mean={mean}, variance={variance})"));
                }
            }
            DensityModel::GaussianNd { mean, variance } => {
                if mean.is_empty() || mean.len() != variance.len() {
                    return bad("mean and variance must have equal nonzero length".into());
                }
                if mean.iter().any(|m| !m.is_finite())
                    || variance.iter().any(|v| !(*v > 0.0 && v.is_finite()))
                {
                    return bad("nonfinite mean or nonpositive variance".into());
                }
            }
            DensityModel::UniformInterval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad(format!("uniform[{lo}, {hi}]"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            DensityModel::GaussianNd { mean, .. } => mean.len(),
            _ => 1,
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        match self {
            DensityModel::Gaussian1d { mean, variance } => normal_pdf(x[0], *mean, *variance),
            DensityModel::GaussianNd { mean, variance } => x
                .iter()
                .zip(mean.iter().zip(variance))
                .map(|(&xi, (&m, &v))| normal_pdf(xi, m, v))
                .product(),
            DensityModel::UniformInterval { lo, hi } => {
                if x[0] >= *lo && x[0] <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    /// Log density; `-inf` outside the support.
    pub fn ln_pdf(&self, x: &[f64]) -> f64 {
        match self {
            DensityModel::Gaussian1d { mean, variance } => normal_ln_pdf(x[0], *mean, *variance),
            DensityModel::GaussianNd { mean, variance } => x
                .iter()
                .zip(mean.iter().zip(variance))
                .map(|(&xi, (&m, &v))| normal_ln_pdf(xi, m, v))
                .sum(),
            DensityModel::UniformInterval { .. } => self.pdf(x).ln(),
        }
    }

    pub fn sample_one(&self, rng: &mut Rng) -> Point {
        match self {
            DensityModel::Gaussian1d { mean, variance } => {
                vec![Normal::new(*mean, variance.sqrt()).unwrap().sample(rng)]
            }
            DensityModel::GaussianNd { mean, variance } => mean
                .iter()
                .zip(variance)
                .map(|(&m, &v)| Normal::new(m, v.sqrt()).unwrap().sample(rng))
                .collect(),
            DensityModel::UniformInterval { lo, hi } => {
                vec![Uniform::new_inclusive(*lo, *hi).sample(rng)]
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Point> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// `P(|X| <= r)` for univariate densities.
    pub fn abs_cdf(&self, r: f64) -> Option<f64> {
        match self {
            DensityModel::Gaussian1d { mean, variance } => {
                let n = StatNormal::new(*mean, variance.sqrt()).ok()?;
                Some((n.cdf(r) - n.cdf(-r)).max(0.0))
            }
            DensityModel::UniformInterval { lo, hi } => {
                let a = lo.max(-r);
                let b = hi.min(r);
                Some(((b - a) / (hi - lo)).clamp(0.0, 1.0))
            }
            DensityModel::GaussianNd { .. } => None,
        }
    }

    /// Mean of the distribution (first moment per coordinate).
    pub fn mean(&self) -> Vec<f64> {
        match self {
            DensityModel::Gaussian1d { mean, .. } => vec![*mean],
            DensityModel::GaussianNd { mean, .. } => mean.clone(),
            DensityModel::UniformInterval { lo, hi } => vec![0.5 * (lo + hi)],
        }
    }
}

fn normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    (-(z * z) / (2.0 * variance)).exp() / (2.0 * PI * variance).sqrt()
}

fn normal_ln_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    -(z * z) / (2.0 * variance) - 0.5 * (2.0 * PI * variance).ln()
}

impl fmt::Display for DensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityModel::Gaussian1d { mean, variance } => write!(f, "normal:{mean},{variance}"),
            DensityModel::GaussianNd { mean, variance } => {
                let join = |v: &[f64]| {
                    v.iter()
                        .map(|x| x.to_string())
                        .collect::<Vec<_>>()
                        .join(";")
                };
                write!(f, "normal-nd:{},{}", join(mean), join(variance))
            }
            DensityModel::UniformInterval { lo, hi } => write!(f, "uniform:{lo},{hi}"),
        }
    }
}

/// Parses `normal:MEAN,VARIANCE`, `normal-sd:MEAN,SD`, `uniform:LO,HI` and
/// `normal-nd:M1;M2,V1;V2`.
impl FromStr for DensityModel {
    type Err = WeightError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WeightError::InvalidDensity(format!("cannot parse density '{s}'"));
        let (family, rest) = s.split_once(':').ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(bad());
        }
        let num = |p: &str| p.parse::<f64>().map_err(|_| bad());
        let list = |p: &str| -> Result<Vec<f64>, WeightError> {
            p.split(';').map(|v| v.trim().parse().map_err(|_| bad())).collect()
        };
        match family.trim() {
            "normal" | "gaussian" => Self::gaussian(num(parts[0])?, num(parts[1])?),
            "normal-sd" => Self::gaussian_sd(num(parts[0])?, num(parts[1])?),
            "normal-nd" => Self::gaussian_nd(list(parts[0])?, list(parts[1])?),
            "uniform" => Self::uniform(num(parts[0])?, num(parts[1])?),
            _ => Err(bad()),
        }
    }
}

/// How each training point is weighted in the empirical risk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightStrategy {
    /// `w = p_test / p_train`
    TrueIw {
        test: DensityModel,
        train: DensityModel,
    },
    Uniform,
    /// `min(inner(x), threshold)`; an infinite threshold disables clipping.
    Clipped {
        inner: Box<WeightStrategy>,
        threshold: f64,
    },
    /// `v = p_target / p_train` for an arbitrary target distribution.
    Custom {
        target: DensityModel,
        train: DensityModel,
    },
    /// Every point gets the same constant weight.
    Constant { value: f64 },
}

impl WeightStrategy {
    pub fn true_iw(test: DensityModel, train: DensityModel) -> Self {
        WeightStrategy::TrueIw { test, train }
    }

    pub fn clipped(inner: WeightStrategy, threshold: f64) -> Result<Self, WeightError> {
        if !(threshold > 0.0) {
            return Err(WeightError::InvalidThreshold(threshold));
        }
        Ok(WeightStrategy::Clipped {
            inner: Box::new(inner),
            threshold,
        })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, WeightError> {
        match self {
            WeightStrategy::Uniform => Ok(1.0),
            WeightStrategy::Constant { value } => Ok(*value),
            WeightStrategy::TrueIw { test, train }
            | WeightStrategy::Custom {
                target: test,
                train,
            } => density_ratio(test, train, x),
            WeightStrategy::Clipped { inner, threshold } => Ok(inner.eval(x)?.min(*threshold)),
        }
    }

    pub fn eval_all(&self, xs: &[Point]) -> Result<Vec<f64>, WeightError> {
        xs.iter().map(|x| self.eval(x)).collect()
    }

    /// Short name used in result tables.
    pub fn name(&self) -> String {
        match self {
            WeightStrategy::TrueIw { .. } => "iw".into(),
            WeightStrategy::Uniform => "uniform".into(),
            WeightStrategy::Clipped { inner, threshold } => {
                format!("clipped({},{})", inner.name(), threshold)
            }
            WeightStrategy::Custom { .. } => "custom".into(),
            WeightStrategy::Constant { value } => format!("constant({value})"),
        }
    }
}

fn density_ratio(target: &DensityModel, train: &DensityModel, x: &[f64]) -> Result<f64, WeightError> {
    if x.len() != train.dim() {
        return Err(WeightError::DimensionMismatch {
            expected: train.dim(),
            found: x.len(),
        });
    }
    let p_train = train.pdf(x);
    if !(p_train >= PDF_FLOOR) {
        return Err(WeightError::SupportViolation {
            x: x.to_vec(),
            pdf: p_train,
        });
    }
    Ok(target.pdf(x) / p_train)
}

/// Log of the density ratio; finite wherever the training pdf is positive in log space.
fn ln_ratio(target: &DensityModel, train: &DensityModel, x: &[f64]) -> Result<f64, WeightError> {
    let lt = train.ln_pdf(x);
    if !lt.is_finite() {
        return Err(WeightError::SupportViolation {
            x: x.to_vec(),
            pdf: train.pdf(x),
        });
    }
    Ok(target.ln_pdf(x) - lt)
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Mean of `exp(a_i)` computed in log space: returns `(ln mean, relative stderr)`.
///
/// The relative standard error is `sd(exp(a)) / (mean(exp(a)) sqrt(M))`.
fn log_mean_exp(a: &[f64]) -> (f64, f64) {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (max, 0.0);
    }
    let m = a.len() as f64;
    let shifted: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let mean = shifted.iter().sum::<f64>() / m;
    let var = shifted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
    (max + mean.ln(), (var / m).sqrt() / mean)
}

fn check_sample_size(m: usize, min: usize) -> Result<(), WeightError> {
    if m < min {
        return Err(WeightError::InvalidParameter(format!(
            "sample size {m} below minimum {min}"
        )));
    }
    Ok(())
}

/// Log weights at `m` points drawn from the test distribution.
fn test_log_weights(
    test: &DensityModel,
    train: &DensityModel,
    m: usize,
    seed: u64,
) -> Result<Vec<f64>, WeightError> {
    let mut rng = rng_from_seed(seed);
    let xs = test.sample(m, &mut rng);
    xs.par_iter().map(|x| ln_ratio(test, train, x)).collect()
}

/// `H_alpha = alpha^{-1} ln E_te[w^alpha]`, Monte-Carlo over test samples.
///
/// Returns `+inf` (with infinite stderr) if the estimate is not finite.
pub fn renyi_divergence(
    test: &DensityModel,
    train: &DensityModel,
    alpha: f64,
    sample_size: usize,
    seed: u64,
) -> Result<McEstimate, WeightError> {
    if !(alpha > 0.0) {
        return Err(WeightError::InvalidParameter(format!("alpha = {alpha}")));
    }
    check_sample_size(sample_size, 1000)?;
    let lw = test_log_weights(test, train, sample_size, seed)?;
    Ok(renyi_from_log_weights(&lw, alpha))
}

fn renyi_from_log_weights(lw: &[f64], alpha: f64) -> McEstimate {
    let scaled: Vec<f64> = lw.iter().map(|v| alpha * v).collect();
    let (ln_mean, rel_se) = log_mean_exp(&scaled);
    let estimate = ln_mean / alpha;
    if !estimate.is_finite() {
        return McEstimate {
            estimate: f64::INFINITY,
            stderr: f64::INFINITY,
        };
    }
    // delta method: se(ln X) ~ se(X) / X
    McEstimate {
        estimate,
        stderr: rel_se / alpha,
    }
}

/// Outcome of the moment condition at one `(m, q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub m: u32,
    pub q: f64,
    pub lhs: f64,
    pub stderr: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// At `q = 0` the left side is an essential supremum; the sample maximum
    /// can only underestimate it.
    pub sup_underestimate: bool,
}

fn ln_factorial(m: u32) -> f64 {
    (1..=m).map(|i| (i as f64).ln()).sum()
}

/// Right-hand side `m! W^{m-2} sigma^2 / 2`.
pub fn moment_rhs(m: u32, w_const: f64, sigma: f64) -> f64 {
    (ln_factorial(m) + (m as f64 - 2.0) * w_const.ln() + 2.0 * sigma.ln() - 2f64.ln()).exp()
}

/// Checks `(E_te[w^{(m-1)/q}])^q <= m! W^{m-2} sigma^2 / 2` by Monte Carlo.
#[allow(clippy::too_many_arguments)]
pub fn moment_check(
    test: &DensityModel,
    train: &DensityModel,
    m: u32,
    q: f64,
    w_const: f64,
    sigma: f64,
    sample_size: usize,
    seed: u64,
) -> Result<MomentCheck, WeightError> {
    let lw = test_log_weights(test, train, sample_size, seed)?;
    moment_check_from_log_weights(&lw, m, q, w_const, sigma)
}

fn moment_check_from_log_weights(
    lw: &[f64],
    m: u32,
    q: f64,
    w_const: f64,
    sigma: f64,
) -> Result<MomentCheck, WeightError> {
    if m < 2 {
        return Err(WeightError::InvalidParameter(format!("m = {m} < 2")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(WeightError::InvalidParameter(format!("q = {q} outside [0, 1]")));
    }
    if !(w_const > 0.0 && sigma > 0.0) {
        return Err(WeightError::InvalidParameter("W and sigma must be positive".into()));
    }
    let rhs = moment_rhs(m, w_const, sigma);
    let power = (m - 1) as f64;
    let (lhs, stderr, sup_underestimate) = if q == 0.0 {
        let max_lw = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ((power * max_lw).exp(), 0.0, true)
    } else {
        let scaled: Vec<f64> = lw.iter().map(|v| v * power / q).collect();
        let (ln_mean, rel_se) = log_mean_exp(&scaled);
        let lhs = (q * ln_mean).exp();
        // d/dX X^q = q X^{q-1}  =>  rel se scales by q
        (lhs, lhs * q * rel_se, false)
    };
    let (lhs, stderr) = if lhs.is_finite() {
        (lhs, stderr)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    Ok(MomentCheck {
        m,
        q,
        lhs,
        stderr,
        rhs,
        satisfied: lhs <= rhs,
        sup_underestimate,
    })
}

/// One grid point of the tail condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub t: f64,
    /// `2 * P_te(w >= t)` estimated from test samples.
    pub empirical: f64,
    pub stderr: f64,
    /// `sigma^2 exp(-t^{1/q} / W)`
    pub bound: f64,
    pub satisfied: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn tail_check(
    test: &DensityModel,
    train: &DensityModel,
    q: f64,
    w_const: f64,
    sigma: f64,
    t_grid: &[f64],
    sample_size: usize,
    seed: u64,
) -> Result<Vec<TailPoint>, WeightError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(WeightError::InvalidParameter(format!("q = {q} outside (0, 1]")));
    }
    if t_grid.iter().any(|&t| !(t > 0.0)) || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(WeightError::InvalidParameter(
            "t grid must be positive and increasing".into(),
        ));
    }
    check_sample_size(sample_size, 1)?;
    let lw = test_log_weights(test, train, sample_size, seed)?;
    Ok(tail_from_log_weights(&lw, q, w_const, sigma, t_grid))
}

fn tail_from_log_weights(lw: &[f64], q: f64, w_const: f64, sigma: f64, t_grid: &[f64]) -> Vec<TailPoint> {
    let m = lw.len() as f64;
    t_grid
        .iter()
        .map(|&t| {
            let lt = t.ln();
            let p = lw.iter().filter(|&&v| v >= lt).count() as f64 / m;
            let empirical = 2.0 * p;
            let stderr = 2.0 * (p * (1.0 - p) / m).sqrt();
            let bound = sigma * sigma * (-t.powf(1.0 / q) / w_const).exp();
            TailPoint {
                t,
                empirical,
                stderr,
                bound,
                satisfied: empirical <= bound,
            }
        })
        .collect()
}

/// Settings for [`diagnose`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub alphas: Vec<f64>,
    pub ms: Vec<u32>,
    pub q: f64,
    pub w_const: f64,
    pub sigma: f64,
    pub t_grid: Vec<f64>,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 1.0, 2.0, 3.0, 4.0],
            ms: vec![2, 3, 4, 5, 6],
            q: 1.0,
            w_const: 1.0,
            sigma: 1.0,
            t_grid: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            sample_size: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenyiPoint {
    pub alpha: f64,
    pub estimate: McEstimate,
}

/// Summary of the weight function between a test/train pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    /// Largest weight over the test sample; an underestimate of the sup.
    pub sup_estimate: f64,
    pub renyi_curve: Vec<RenyiPoint>,
    pub moment_table: Vec<MomentCheck>,
    pub tail_curve: Vec<TailPoint>,
    pub sample_size: usize,
    pub seed: u64,
}

/// Runs every diagnostic on one shared test sample.
pub fn diagnose(
    test: &DensityModel,
    train: &DensityModel,
    cfg: &DiagnosticsConfig,
) -> Result<WeightDiagnostics, WeightError> {
    check_sample_size(cfg.sample_size, 1000)?;
    let lw = test_log_weights(test, train, cfg.sample_size, cfg.seed)?;
    let sup_estimate = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
    let renyi_curve = cfg
        .alphas
        .iter()
        .map(|&alpha| {
            if !(alpha > 0.0) {
                return Err(WeightError::InvalidParameter(format!("alpha = {alpha}")));
            }
            Ok(RenyiPoint {
                alpha,
                estimate: renyi_from_log_weights(&lw, alpha),
            })
        })
        .collect::<Result<_, _>>()?;
    let moment_table = cfg
        .ms
        .iter()
        .map(|&m| moment_check_from_log_weights(&lw, m, cfg.q, cfg.w_const, cfg.sigma))
        .collect::<Result<_, _>>()?;
    let tail_curve = if cfg.q > 0.0 && !cfg.t_grid.is_empty() {
        tail_check_grid_ok(&cfg.t_grid)?;
        tail_from_log_weights(&lw, cfg.q, cfg.w_const, cfg.sigma, &cfg.t_grid)
    } else {
        Vec::new()
    };
    Ok(WeightDiagnostics {
        sup_estimate,
        renyi_curve,
        moment_table,
        tail_curve,
        sample_size: cfg.sample_size,
        seed: cfg.seed,
    })
}

fn tail_check_grid_ok(t_grid: &[f64]) -> Result<(), WeightError> {
    if t_grid.iter().any(|&t| !(t > 0.0)) || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(WeightError::InvalidParameter(
            "t grid must be positive and increasing".into(),
        ));
    }
    Ok(())
}

/// Largest observed weight over a sample of training points.
pub fn max_weight(strategy: &WeightStrategy, xs: &[Point]) -> Result<f64, WeightError> {
    Ok(strategy
        .eval_all(xs)?
        .into_iter()
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{adaptive_simpson, gaussian_renyi_closed_form};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tr() -> DensityModel {
        DensityModel::gaussian(0.0, 0.5).unwrap()
    }
    fn te() -> DensityModel {
        DensityModel::gaussian(1.5, 0.3).unwrap()
    }

    #[test]
    fn pdfs_integrate_to_one() {
        for d in [tr(), te(), DensityModel::uniform(-1.0, 2.0).unwrap()] {
            let total = adaptive_simpson(&|x| d.pdf(&[x]), -12.0, 12.0, 1e-10);
            assert!((total - 1.0).abs() < 1e-6, "{d}: {total}");
        }
    }

    #[test]
    fn identical_densities_give_unit_weight() {
        let s = WeightStrategy::true_iw(te(), te());
        for x in [-2.0, 0.0, 1.5, 3.0] {
            assert_relative_eq!(s.eval(&[x]).unwrap(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn gaussian_ratio_matches_formula() {
        let s = WeightStrategy::true_iw(te(), tr());
        let p = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
        let expect = p(0.0, 1.5, 0.3) / p(0.0, 0.0, 0.5);
        assert_relative_eq!(s.eval(&[0.0]).unwrap(), expect, max_relative = 1e-14);
    }

    #[test]
    fn clipping_takes_minimum() {
        let s = WeightStrategy::clipped(WeightStrategy::Constant { value: 3.0 }, 2.0).unwrap();
        assert_eq!(s.eval(&[0.0]).unwrap(), 2.0);
        assert!(WeightStrategy::clipped(WeightStrategy::Uniform, 0.0).is_err());
        let open = WeightStrategy::clipped(WeightStrategy::true_iw(te(), tr()), f64::INFINITY).unwrap();
        let raw = WeightStrategy::true_iw(te(), tr());
        assert_eq!(open.eval(&[2.0]).unwrap(), raw.eval(&[2.0]).unwrap());
    }

    #[test]
    fn support_violation_detected() {
        let s = WeightStrategy::true_iw(
            DensityModel::uniform(0.0, 1.0).unwrap(),
            DensityModel::uniform(-1.0, 0.5).unwrap(),
        );
        assert!(matches!(s.eval(&[0.8]), Err(WeightError::SupportViolation { .. })));
        // far tail of a Gaussian underflows
        let g = WeightStrategy::true_iw(te(), tr());
        assert!(matches!(g.eval(&[40.0]), Err(WeightError::SupportViolation { .. })));
    }

    #[test]
    fn density_parsing() {
        let d: DensityModel = "normal:1.5,0.3".parse().unwrap();
        assert_eq!(d, te());
        let d: DensityModel = "normal-sd:0,2".parse().unwrap();
        assert_eq!(d, DensityModel::gaussian(0.0, 4.0).unwrap());
        let d: DensityModel = "uniform:-1,1".parse().unwrap();
        assert_eq!(d.to_string().parse::<DensityModel>().unwrap(), d);
        assert!("normal:1".parse::<DensityModel>().is_err());
        assert!("normal:0,-1".parse::<DensityModel>().is_err());
    }

    #[test]
    fn renyi_of_identical_is_zero() {
        let h = renyi_divergence(&te(), &te(), 2.0, 100_000, 1).unwrap();
        assert!(h.estimate.abs() <= 0.02);
        assert!(h.estimate.abs() <= 3.0 * h.stderr + 1e-12);
    }

    #[test]
    fn renyi_matches_gaussian_closed_form() {
        let h = renyi_divergence(&te(), &tr(), 1.0, 200_000, 11).unwrap();
        let exact = gaussian_renyi_closed_form(1.5, 0.3, 0.0, 0.5, 1.0);
        assert!(
            (h.estimate - exact).abs() <= 3.0 * h.stderr,
            "{} vs {exact} (se {})",
            h.estimate,
            h.stderr
        );
    }

    #[test]
    fn renyi_monotone_in_alpha() {
        let lo = renyi_divergence(&te(), &tr(), 0.5, 100_000, 5).unwrap();
        let hi = renyi_divergence(&te(), &tr(), 1.5, 100_000, 5).unwrap();
        let se = (lo.stderr.powi(2) + hi.stderr.powi(2)).sqrt();
        assert!(lo.estimate <= hi.estimate + 3.0 * se);
    }

    #[test]
    fn renyi_rejects_bad_inputs() {
        assert!(renyi_divergence(&te(), &tr(), 0.0, 1000, 0).is_err());
        assert!(renyi_divergence(&te(), &tr(), 1.0, 999, 0).is_err());
    }

    #[test]
    fn moment_check_identical() {
        let c = moment_check(&te(), &te(), 4, 0.5, 1.0, 1.0, 10_000, 3).unwrap();
        assert_relative_eq!(c.lhs, 1.0, epsilon = 1e-12);
        // 4! * 1 * 1 / 2 = 12 >= 1
        assert!(c.satisfied);
        let c = moment_check(&te(), &te(), 2, 1.0, 1.0, 0.5, 10_000, 3).unwrap();
        assert!(!c.satisfied, "rhs = 0.25 < 1");
    }

    #[test]
    fn moment_check_first_moment_matches_quadrature() {
        let (t, s) = (te(), tr());
        let c = moment_check(&t, &s, 2, 1.0, 1.0, 1.0, 400_000, 17).unwrap();
        let exact = adaptive_simpson(&|x| t.pdf(&[x]).powi(2) / s.pdf(&[x]), -8.0, 10.0, 1e-10);
        assert!((c.lhs - exact).abs() <= 3.0 * c.stderr, "{} vs {exact} ± {}", c.lhs, c.stderr);
    }

    #[test]
    fn moment_check_bounded_pair() {
        // w = 2 on [0,1]: E_te[w^{(m-1)/q}]^q = 2^{m-1}
        let t = DensityModel::uniform(0.0, 1.0).unwrap();
        let s = DensityModel::uniform(-1.0, 1.0).unwrap();
        for (m, q) in [(2, 1.0), (3, 0.5), (5, 0.25)] {
            let c = moment_check(&t, &s, m, q, 2.0, 2.0, 5_000, 1).unwrap();
            assert!(c.lhs <= 2f64.powi(m as i32 - 1) * (1.0 + 1e-12));
        }
        let c = moment_check(&t, &s, 3, 0.0, 2.0, 2.0, 5_000, 1).unwrap();
        assert!(c.sup_underestimate);
        assert_relative_eq!(c.lhs, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn tail_check_cases() {
        let pts = tail_check(&te(), &te(), 1.0, 1.0, 1.0, &[1.5, 2.0], 10_000, 2).unwrap();
        assert!(pts.iter().all(|p| p.empirical == 0.0));
        let pts = tail_check(&te(), &tr(), 1.0, 1.0, 1.0, &[1e-9], 10_000, 2).unwrap();
        assert_eq!(pts[0].empirical, 2.0);
        assert!(tail_check(&te(), &tr(), 1.0, 1.0, 1.0, &[2.0, 1.0], 10, 2).is_err());
    }

    #[test]
    fn tail_matches_quadrature() {
        let (t, s) = (te(), tr());
        let thr = 10.0;
        let pts = tail_check(&t, &s, 1.0, 1.0, 1.0, &[thr], 200_000, 23).unwrap();
        let exact = 2.0
            * adaptive_simpson(
                &|x| {
                    if t.pdf(&[x]) / s.pdf(&[x]) >= thr {
                        t.pdf(&[x])
                    } else {
                        0.0
                    }
                },
                -8.0,
                10.0,
                1e-11,
            );
        assert!((pts[0].empirical - exact).abs() <= 3.0 * pts[0].stderr, "{} vs {exact}", pts[0].empirical);
    }

    #[test]
    fn diagnostics_bundle() {
        let cfg = DiagnosticsConfig {
            sample_size: 20_000,
            ..Default::default()
        };
        let d = diagnose(&te(), &tr(), &cfg).unwrap();
        assert_eq!(d.renyi_curve.len(), cfg.alphas.len());
        assert!(d.sup_estimate > 1.0);
        assert!(d.renyi_curve.iter().all(|p| p.estimate.estimate.is_finite()));
    }

    proptest! {
        #[test]
        fn uniform_is_exactly_one(x in -10.0f64..10.0) {
            prop_assert_eq!(WeightStrategy::Uniform.eval(&[x]).unwrap(), 1.0);
        }

        #[test]
        fn clipping_monotone_in_threshold(x in -1.5f64..3.0, d1 in 0.01f64..50.0, d2 in 0.01f64..50.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let base = WeightStrategy::true_iw(te(), tr());
            let a = WeightStrategy::clipped(base.clone(), lo).unwrap().eval(&[x]).unwrap();
            let b = WeightStrategy::clipped(base, hi).unwrap().eval(&[x]).unwrap();
            prop_assert!(a <= b);
        }

        #[test]
        fn ratio_times_train_pdf_is_test_pdf(x in -2.0f64..4.0) {
            let w = WeightStrategy::true_iw(te(), tr()).eval(&[x]).unwrap();
            let lhs = w * tr().pdf(&[x]);
            let rhs = te().pdf(&[x]);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
        }
    }
}
