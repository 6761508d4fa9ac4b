//! The importance-weighted KRR estimator.
//!
//! Given weights `w_i >= 0` the estimator minimizes
//!
//! ```text
//! (1/n) sum_i w_i (f(x_i) - y_i)^2 + lambda |f|_H^2
//! ```
//!
//! over the RKHS. Points with `w_i = 0` do not enter the objective and are
//! dropped; `n` stays the original sample count. Over the retained points the
//! representer coefficients solve `(K + n lambda diag(1/w)) alpha = y`.
//!
//! For kernels with an explicit feature map the same minimizer can be found
//! in feature space, `(Phi^T W Phi / n + lambda I) theta = Phi^T W y / n`,
//! and the coefficients recovered from the stationarity condition
//! `alpha_i = w_i (y_i - f(x_i)) / (n lambda)`. That route is used for large
//! samples when the feature dimension is small.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{FeatureMap, KernelError, KernelSpec, Point};
use crate::weights::{WeightError, WeightStrategy};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SolveError {
    #[error("regularization parameter must be positive and finite, got {0}")]
    InvalidRegularizer(f64),
    #[error("all training weights are zero; nothing to fit")]
    EmptyEffectiveSample,
    #[error("linear system ill-conditioned after jitter escalation (condition estimate {condition_estimate:e})")]
    IllConditioned { condition_estimate: f64 },
    #[error("invalid training set: {0}")]
    InvalidData(String),
    #[error("weights must be finite and nonnegative (index {index}, value {value})")]
    InvalidWeight { index: usize, value: f64 },
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Input-output pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub xs: Vec<Point>,
    pub ys: Vec<f64>,
}

impl TrainingSet {
    pub fn new(xs: Vec<Point>, ys: Vec<f64>) -> Result<Self, SolveError> {
        if xs.is_empty() {
            return Err(SolveError::InvalidData("empty training set".into()));
        }
        if xs.len() != ys.len() {
            return Err(SolveError::InvalidData(format!(
                "{} inputs but {} outputs",
                xs.len(),
                ys.len()
            )));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(SolveError::InvalidData("nonfinite output".into()));
        }
        let d = xs[0].len();
        if d == 0 || xs.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
            return Err(SolveError::InvalidData(
                "inputs must be finite with a common nonzero dimension".into(),
            ));
        }
        Ok(Self { xs, ys })
    }

    /// Univariate convenience constructor.
    pub fn from_1d(xs: &[f64], ys: &[f64]) -> Result<Self, SolveError> {
        Self::new(xs.iter().map(|&x| vec![x]).collect(), ys.to_vec())
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs[0].len()
    }
}

/// Which linear system to solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Feature space for finite-rank kernels on large samples, otherwise dual.
    #[default]
    Auto,
    /// Cholesky on `K + n lambda diag(1/w)`.
    Dual,
    /// Feature-space ridge system; requires an explicit feature map.
    Primal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub method: SolveMethod,
    /// First jitter, relative to `trace / n`.
    pub jitter_start: f64,
    /// Largest jitter tried before giving up, relative to `trace / n`.
    pub jitter_max: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: SolveMethod::Auto,
            jitter_start: 1e-10,
            jitter_max: 1e-6,
        }
    }
}

impl FitOptions {
    pub fn dual() -> Self {
        Self {
            method: SolveMethod::Dual,
            ..Self::default()
        }
    }
}

/// Retained-sample size above which `Auto` prefers the feature-space solve.
const PRIMAL_MIN_SAMPLES: usize = 400;

/// A fitted predictor `f(x) = sum_i alpha_i K(x, support_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitModel {
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub support: Vec<Point>,
    pub alpha: Vec<f64>,
    pub weights_used: Vec<f64>,
    pub dropped_zero_weight_count: usize,
    /// Sample count `n` in the `1/n` factor (includes dropped points).
    pub n_total: usize,
    /// Diagonal jitter added to the dual system, zero when none was needed.
    #[serde(default)]
    pub jitter: f64,
    /// Feature-space coefficients when the primal route was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_coefficients: Option<Vec<f64>>,
}

impl FitModel {
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        if let Some(theta) = &self.feature_coefficients {
            if let Some(fm) = self.kernel.feature_map(x.len()) {
                return fm.eval(x).iter().zip(theta).map(|(a, b)| a * b).sum();
            }
        }
        self.support
            .iter()
            .zip(&self.alpha)
            .map(|(s, a)| a * self.kernel.eval(x, s))
            .sum()
    }

    pub fn predict(&self, xs: &[Point]) -> Vec<f64> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.predict_one(x)).collect()
    }

    /// Squared RKHS norm `alpha^T K alpha`.
    pub fn rkhs_norm_sq(&self) -> f64 {
        if let Some(theta) = &self.feature_coefficients {
            return theta.iter().map(|t| t * t).sum();
        }
        let mut total = 0.0;
        for (i, si) in self.support.iter().enumerate() {
            for (j, sj) in self.support.iter().enumerate() {
                total += self.alpha[i] * self.alpha[j] * self.kernel.eval(si, sj);
            }
        }
        total
    }
}

/// Training data, weights and Gram matrix of the retained points.
///
/// Building the problem once and calling [`IwkrrProblem::solve`] for many
/// regularization values avoids recomputing the Gram matrix.
#[derive(Clone, Debug)]
pub struct IwkrrProblem {
    kernel: KernelSpec,
    support: Vec<Point>,
    ys: DVector<f64>,
    weights: Vec<f64>,
    n_total: usize,
    dropped: usize,
    gram: Option<DMatrix<f64>>,
    features: Option<(FeatureMap, DMatrix<f64>)>,
    options: FitOptions,
}

impl IwkrrProblem {
    pub fn new(
        kernel: &KernelSpec,
        data: &TrainingSet,
        weights: &[f64],
        options: FitOptions,
    ) -> Result<Self, SolveError> {
        Self::with_gram(kernel, data, weights, None, options)
    }

    /// Like [`IwkrrProblem::new`] with a precomputed full `n x n` Gram matrix.
    pub fn with_gram(
        kernel: &KernelSpec,
        data: &TrainingSet,
        weights: &[f64],
        full_gram: Option<&DMatrix<f64>>,
        options: FitOptions,
    ) -> Result<Self, SolveError> {
        kernel.validate()?;
        if data.is_empty() {
            return Err(SolveError::InvalidData("empty training set".into()));
        }
        if weights.len() != data.len() {
            return Err(SolveError::InvalidData(format!(
                "{} weights for {} points",
                weights.len(),
                data.len()
            )));
        }
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(SolveError::InvalidWeight { index, value });
        }
        let keep: Vec<usize> = (0..data.len()).filter(|&i| weights[i] > 0.0).collect();
        if keep.is_empty() {
            return Err(SolveError::EmptyEffectiveSample);
        }
        let support: Vec<Point> = keep.iter().map(|&i| data.xs[i].clone()).collect();
        let ys = DVector::from_iterator(keep.len(), keep.iter().map(|&i| data.ys[i]));
        let kept_weights: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();

        let fm = kernel.feature_map(data.dim());
        let use_primal = match options.method {
            SolveMethod::Primal => {
                if fm.is_none() {
                    return Err(SolveError::InvalidData(
                        "primal solve requires a kernel with an explicit feature map".into(),
                    ));
                }
                true
            }
            SolveMethod::Dual => false,
            SolveMethod::Auto => fm
                .as_ref()
                .is_some_and(|f| keep.len() >= PRIMAL_MIN_SAMPLES && 2 * f.len() < keep.len()),
        };
        let (gram, features) = if use_primal {
            let fm = fm.expect("checked above");
            let design = fm.design(&support);
            (None, Some((fm, design)))
        } else {
            let g = match full_gram {
                Some(g) => DMatrix::from_fn(keep.len(), keep.len(), |a, b| g[(keep[a], keep[b])]),
                None => kernel.gram(&support, &support)?.entries,
            };
            (Some(g), None)
        };
        Ok(Self {
            kernel: kernel.clone(),
            support,
            ys,
            weights: kept_weights,
            n_total: data.len(),
            dropped: data.len() - keep.len(),
            gram,
            features,
            options,
        })
    }

    pub fn retained(&self) -> usize {
        self.support.len()
    }

    pub fn solve(&self, lambda: f64) -> Result<FitModel, SolveError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(SolveError::InvalidRegularizer(lambda));
        }
        let (alpha, jitter, theta) = match (&self.gram, &self.features) {
            (Some(g), _) => {
                let (a, j) = self.solve_dual(g, lambda)?;
                (a, j, None)
            }
            (None, Some((_, design))) => {
                let (a, t) = self.solve_primal(design, lambda)?;
                (a, 0.0, Some(t))
            }
            (None, None) => unreachable!("problem always holds one representation"),
        };
        Ok(FitModel {
            kernel: self.kernel.clone(),
            lambda,
            support: self.support.clone(),
            alpha: alpha.iter().cloned().collect(),
            weights_used: self.weights.clone(),
            dropped_zero_weight_count: self.dropped,
            n_total: self.n_total,
            jitter,
            feature_coefficients: theta.map(|t| t.iter().cloned().collect()),
        })
    }

    fn solve_dual(&self, gram: &DMatrix<f64>, lambda: f64) -> Result<(DVector<f64>, f64), SolveError> {
        let n = self.n_total as f64;
        let m = self.support.len();
        let mut system = gram.clone();
        for i in 0..m {
            system[(i, i)] += n * lambda / self.weights[i];
        }
        let (chol, jitter) = cholesky_with_jitter(system, &self.options)?;
        Ok((chol.solve(&self.ys), jitter))
    }

    fn solve_primal(
        &self,
        design: &DMatrix<f64>,
        lambda: f64,
    ) -> Result<(DVector<f64>, DVector<f64>), SolveError> {
        let n = self.n_total as f64;
        let p = design.ncols();
        let w = DVector::from_column_slice(&self.weights);
        let weighted = DMatrix::from_fn(design.nrows(), p, |i, j| design[(i, j)] * w[i]);
        let mut normal = design.transpose() * &weighted / n;
        for j in 0..p {
            normal[(j, j)] += lambda;
        }
        let rhs = weighted.transpose() * &self.ys / n;
        let (chol, _) = cholesky_with_jitter(normal, &self.options)?;
        let theta = chol.solve(&rhs);
        let fitted = design * &theta;
        let alpha = DVector::from_fn(self.support.len(), |i, _| {
            self.weights[i] * (self.ys[i] - fitted[i]) / (n * lambda)
        });
        Ok((alpha, theta))
    }
}

/// Cholesky with the jitter ladder `start, 10 start, ..., max` (relative to `trace / n`).
pub(crate) fn cholesky_with_jitter(
    system: DMatrix<f64>,
    options: &FitOptions,
) -> Result<(Cholesky<f64, Dyn>, f64), SolveError> {
    if let Some(c) = Cholesky::new(system.clone()) {
        return Ok((c, 0.0));
    }
    let m = system.nrows();
    let base = (system.trace() / m as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = options.jitter_start;
    while rel <= options.jitter_max * (1.0 + 1e-9) {
        let jitter = rel * base;
        let mut s = system.clone();
        for i in 0..m {
            s[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(s) {
            return Ok((c, jitter));
        }
        rel *= 10.0;
    }
    Err(SolveError::IllConditioned {
        condition_estimate: condition_estimate(&system),
    })
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let max = eig.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = eig.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Fits the weighted estimator with weights taken from `strategy`.
pub fn fit_iwkrr(
    kernel: &KernelSpec,
    data: &TrainingSet,
    strategy: &WeightStrategy,
    lambda: f64,
    options: FitOptions,
) -> Result<FitModel, SolveError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SolveError::InvalidRegularizer(lambda));
    }
    let weights = strategy.eval_all(&data.xs)?;
    fit_with_weights(kernel, data, &weights, lambda, options)
}

/// Fits with explicit per-point weights.
pub fn fit_with_weights(
    kernel: &KernelSpec,
    data: &TrainingSet,
    weights: &[f64],
    lambda: f64,
    options: FitOptions,
) -> Result<FitModel, SolveError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SolveError::InvalidRegularizer(lambda));
    }
    IwkrrProblem::new(kernel, data, weights, options)?.solve(lambda)
}

/// `(1/n) sum_i w(x_i) (f(x_i) - y_i)^2`.
pub fn weighted_empirical_risk(
    f: impl Fn(&[f64]) -> f64,
    data: &TrainingSet,
    strategy: &WeightStrategy,
) -> Result<f64, SolveError> {
    let weights = strategy.eval_all(&data.xs)?;
    Ok(weighted_risk_with_weights(f, data, &weights))
}

pub fn weighted_risk_with_weights(f: impl Fn(&[f64]) -> f64, data: &TrainingSet, weights: &[f64]) -> f64 {
    let total: f64 = data
        .xs
        .iter()
        .zip(&data.ys)
        .zip(weights)
        .map(|((x, y), w)| {
            let r = f(x) - y;
            w * r * r
        })
        .sum();
    total / data.len() as f64
}

/// Regularized objective of a fitted model: weighted risk plus `lambda |f|^2`.
pub fn objective_value(model: &FitModel, data: &TrainingSet, weights: &[f64]) -> f64 {
    weighted_risk_with_weights(|x| model.predict_one(x), data, weights)
        + model.lambda * model.rkhs_norm_sq()
}

/// Mean squared error of the model on a test set.
pub fn test_mse(model: &FitModel, xs: &[Point], ys: &[f64]) -> Result<f64, SolveError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(SolveError::InvalidData(
            "test set must be nonempty with matching lengths".into(),
        ));
    }
    let preds = model.predict(xs);
    Ok(mse(&preds, ys))
}

pub fn mse(preds: &[f64], targets: &[f64]) -> f64 {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64
}
