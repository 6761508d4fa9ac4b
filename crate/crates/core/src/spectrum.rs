//! Empirical spectra, effective dimension and clipped-operator checks.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{FeatureMap, KernelError, KernelSpec, Point};
use crate::rng::{child_rng, label, rng_from_seed};
use crate::weights::{DensityModel, WeightError, WeightStrategy};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("need at least one point")]
    EmptySample,
    #[error("eigenvalue {value:e} is negative beyond the clamping tolerance (condition estimate {condition:e})")]
    NegativeEigenvalue { value: f64, condition: f64 },
    #[error("only {usable} usable eigenvalues for the decay fit, need at least 5")]
    InsufficientSpectrum { usable: usize },
    #[error("operator matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

/// Eigenvalues between this and zero are rounding noise and clamp to zero.
pub const CLAMP_TOL: f64 = 1e-10;

/// Clamps tiny negative eigenvalues to zero and sorts descending.
fn clean_eigenvalues(mut eig: Vec<f64>) -> Result<Vec<f64>, SpectrumError> {
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -CLAMP_TOL {
        let smallest_abs = eig.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        return Err(SpectrumError::NegativeEigenvalue {
            value: min,
            condition: max / smallest_abs,
        });
    }
    for v in eig.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    eig.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    Ok(eig)
}

fn symmetric_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().cloned().collect()
}

/// Eigenvalues of the empirical covariance operator, i.e. of `K / n`, descending.
pub fn empirical_eigs(kernel: &KernelSpec, xs: &[Point]) -> Result<Vec<f64>, SpectrumError> {
    if xs.is_empty() {
        return Err(SpectrumError::EmptySample);
    }
    let n = xs.len() as f64;
    let g = kernel.gram(xs, xs)?.entries / n;
    clean_eigenvalues(symmetric_eigenvalues(g))
}

/// `N(lambda) = sum_i mu_i / (mu_i + lambda)`.
pub fn effective_dimension(eigenvalues: &[f64], lambda: f64) -> f64 {
    eigenvalues.iter().map(|&m| m / (m + lambda)).sum()
}

/// `k` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..k)
                .map(|i| {
                    if i == k - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (k - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Power-law fit `mu_i ~ i^{-1/s}` of a spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub s_hat: f64,
    pub slope: f64,
    pub r_squared: f64,
    /// Number of eigenvalues used in the regression.
    pub used: usize,
    /// True when the spectrum drops below the tail floor, i.e. it is
    /// numerically finite rank and the fit only saw its positive part.
    pub finite_rank: bool,
}

pub const DEFAULT_HEAD_SKIP: usize = 2;
pub const DEFAULT_TAIL_FLOOR_REL: f64 = 1e-10;

/// Least-squares slope of `ln mu_i` against `ln i` over
/// `head_skip < i` with `mu_i > tail_floor` (1-based `i`).
pub fn estimate_decay(
    eigenvalues: &[f64],
    head_skip: usize,
    tail_floor: f64,
) -> Result<DecayFit, SpectrumError> {
    let tail: Vec<(f64, f64)> = eigenvalues
        .iter()
        .enumerate()
        .skip(head_skip)
        .map(|(i, &m)| ((i + 1) as f64, m))
        .collect();
    let usable: Vec<(f64, f64)> = tail
        .iter()
        .filter(|(_, m)| *m > tail_floor)
        .map(|&(i, m)| (i.ln(), m.ln()))
        .collect();
    if usable.len() < 5 {
        return Err(SpectrumError::InsufficientSpectrum {
            usable: usable.len(),
        });
    }
    let finite_rank = usable.len() < tail.len();
    let (slope, _, r_squared) = linear_fit(&usable);
    let s_hat = if slope < 0.0 { (-1.0 / slope).clamp(0.0, 1.0) } else { 1.0 };
    Ok(DecayFit {
        s_hat,
        slope,
        r_squared,
        used: usable.len(),
        finite_rank,
    })
}

/// Decay fit with the default head skip and a tail floor relative to `mu_1`.
pub fn estimate_decay_default(eigenvalues: &[f64]) -> Result<DecayFit, SpectrumError> {
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    estimate_decay(eigenvalues, DEFAULT_HEAD_SKIP, DEFAULT_TAIL_FLOOR_REL * top)
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, R^2)`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

/// `max(1, max_{lambda in grid} sqrt(N(lambda) lambda^s))`.
///
/// A grid can only underestimate the supremum over `(0, 1]`.
pub fn estimate_es(eigenvalues: &[f64], s: f64, lambda_grid: &[f64]) -> Result<f64, SpectrumError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SpectrumError::InvalidParameter(format!("s = {s} outside [0, 1]")));
    }
    if lambda_grid.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
        return Err(SpectrumError::InvalidParameter(
            "lambda grid must lie in (0, 1]".into(),
        ));
    }
    Ok(lambda_grid
        .iter()
        .map(|&l| (effective_dimension(eigenvalues, l) * l.powf(s)).sqrt())
        .fold(1.0, f64::max))
}

/// Default grid for `E_s`: 60 log-spaced points in `[1e-6, 1]`.
pub fn default_es_grid() -> Vec<f64> {
    log_grid(1e-6, 1.0, 60)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub sample_size: usize,
    pub eff_dim_curve: Vec<(f64, f64)>,
    pub s_hat: f64,
    pub es_hat: f64,
    pub es_grid: Vec<f64>,
    /// `None` when too few eigenvalues survive the tail floor; `s_hat`
    /// then falls back to 1, which always satisfies the capacity condition.
    pub fit_diagnostics: Option<DecayFit>,
}

/// Full spectral summary of a kernel on a sample.
pub fn spectrum_report(
    kernel: &KernelSpec,
    xs: &[Point],
    lambda_grid: &[f64],
) -> Result<SpectrumReport, SpectrumError> {
    let eigenvalues = empirical_eigs(kernel, xs)?;
    report_from_eigenvalues(eigenvalues, xs.len(), lambda_grid)
}

pub fn report_from_eigenvalues(
    eigenvalues: Vec<f64>,
    sample_size: usize,
    lambda_grid: &[f64],
) -> Result<SpectrumReport, SpectrumError> {
    let eff_dim_curve = lambda_grid
        .iter()
        .map(|&l| (l, effective_dimension(&eigenvalues, l)))
        .collect();
    let fit = estimate_decay_default(&eigenvalues).ok();
    let s_hat = fit.as_ref().map_or(1.0, |f| f.s_hat);
    let es_grid = default_es_grid();
    let es_hat = estimate_es(&eigenvalues, s_hat, &es_grid)?;
    Ok(SpectrumReport {
        eigenvalues,
        sample_size,
        eff_dim_curve,
        s_hat,
        es_hat,
        es_grid,
        fit_diagnostics: fit,
    })
}

/// A covariance operator in an explicit feature basis, `E[v(x) phi(x) phi(x)^T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureOperator {
    pub matrix: DMatrix<f64>,
}

impl FeatureOperator {
    /// Weighted sample mean of `phi phi^T` over the rows of a design matrix.
    pub fn from_design(design: &DMatrix<f64>, weights: Option<&[f64]>) -> Self {
        let n = design.nrows() as f64;
        let matrix = match weights {
            None => design.transpose() * design / n,
            Some(w) => {
                let scaled = DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| design[(i, j)] * w[i]);
                design.transpose() * scaled / n
            }
        };
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        Self { matrix }
    }

    pub fn basis_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues(self.matrix.clone())
    }

    pub fn check_psd(&self) -> Result<(), SpectrumError> {
        let min = self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min);
        if min < -1e-8 {
            return Err(SpectrumError::NotPsd(min));
        }
        Ok(())
    }

    fn shifted_inverse(&self, lambda: f64) -> DMatrix<f64> {
        let mut a = self.matrix.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        a.cholesky()
            .expect("PSD plus positive shift is positive definite")
            .inverse()
    }

    /// `Tr(T (T + lambda)^{-1}) = sum_i mu_i / (mu_i + lambda)`.
    pub fn effective_dimension(&self, lambda: f64) -> f64 {
        let eig: Vec<f64> = self.eigenvalues().into_iter().map(|v| v.max(0.0)).collect();
        effective_dimension(&eig, lambda)
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// `(|(T - T_D)(T + lambda)^{-1}|, |T (T_D + lambda)^{-1}|)`.
pub fn operator_norms(t: &FeatureOperator, td: &FeatureOperator, lambda: f64) -> (f64, f64) {
    let norm1 = spectral_norm(&((&t.matrix - &td.matrix) * t.shifted_inverse(lambda)));
    let norm2 = spectral_norm(&(&t.matrix * td.shifted_inverse(lambda)));
    (norm1, norm2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorCheck {
    pub threshold: f64,
    pub lambda: f64,
    pub norm1: f64,
    pub norm1_se: f64,
    pub norm2: f64,
    pub norm2_se: f64,
    pub tr_t: f64,
    pub tr_td: f64,
}

impl OperatorCheck {
    /// Bounds `1/2` and `2` with 10% multiplicative slack plus 3 bootstrap SE.
    pub fn norms_within_slack(&self) -> bool {
        self.norm1 <= 0.5 * 1.1 + 3.0 * self.norm1_se && self.norm2 <= 2.0 * 1.1 + 3.0 * self.norm2_se
    }

    pub fn trace_monotone(&self) -> bool {
        self.tr_td <= self.tr_t + 1e-6
    }
}

/// Monte-Carlo samples behind the clipped-operator checks, reusable over a
/// grid of `(D, lambda)`.
///
/// The norm checks compare `T` estimated from test samples against `T_D`
/// estimated from weighted training samples. The trace check estimates both
/// operators from the same training sample, once with `w` and once with
/// `min(w, D)`, so the inequality is exact sample by sample.
#[derive(Clone, Debug)]
pub struct ClippedOperatorSamples {
    test_design: DMatrix<f64>,
    train_design: DMatrix<f64>,
    train_weights: Vec<f64>,
    seed: u64,
}

impl ClippedOperatorSamples {
    pub fn new(
        feature_map: &FeatureMap,
        test: &DensityModel,
        train: &DensityModel,
        mc_size: usize,
        seed: u64,
    ) -> Result<Self, SpectrumError> {
        if mc_size < 10_000 {
            return Err(SpectrumError::InvalidParameter(format!(
                "mc_size {mc_size} below minimum 10000"
            )));
        }
        let mut rte = child_rng(seed, &[label("test")]);
        let mut rtr = child_rng(seed, &[label("train")]);
        let xte = test.sample(mc_size, &mut rte);
        let xtr = train.sample(mc_size, &mut rtr);
        let iw = WeightStrategy::true_iw(test.clone(), train.clone());
        let train_weights = iw.eval_all(&xtr)?;
        Ok(Self {
            test_design: feature_map.design(&xte),
            train_design: feature_map.design(&xtr),
            train_weights,
            seed,
        })
    }

    pub fn max_weight(&self) -> f64 {
        self.train_weights.iter().cloned().fold(0.0, f64::max)
    }

    /// `T` from test samples.
    pub fn test_operator(&self) -> FeatureOperator {
        FeatureOperator::from_design(&self.test_design, None)
    }

    /// `T` from training samples weighted by `w`.
    pub fn weighted_operator(&self) -> FeatureOperator {
        FeatureOperator::from_design(&self.train_design, Some(&self.train_weights))
    }

    /// `T_D` from training samples weighted by `min(w, D)`.
    pub fn clipped_operator(&self, threshold: f64) -> FeatureOperator {
        let wd: Vec<f64> = self.train_weights.iter().map(|w| w.min(threshold)).collect();
        FeatureOperator::from_design(&self.train_design, Some(&wd))
    }

    pub fn check(&self, threshold: f64, lambda: f64, bootstrap: usize) -> Result<OperatorCheck, SpectrumError> {
        if !(threshold > 0.0) || !(lambda > 0.0) {
            return Err(SpectrumError::InvalidParameter(
                "threshold and lambda must be positive".into(),
            ));
        }
        let t = self.test_operator();
        let td = self.clipped_operator(threshold);
        t.check_psd()?;
        td.check_psd()?;
        let (norm1, norm2) = operator_norms(&t, &td, lambda);
        let tw = self.weighted_operator();
        tw.check_psd()?;
        let tr_t = tw.effective_dimension(lambda);
        let tr_td = td.effective_dimension(lambda);

        let wd: Vec<f64> = self.train_weights.iter().map(|w| w.min(threshold)).collect();
        let boot: Vec<(f64, f64)> = (0..bootstrap)
            .into_par_iter()
            .map(|b| {
                let mut rng = child_rng(self.seed, &[label("bootstrap"), b as u64]);
                let te = resample_operator(&self.test_design, None, &mut rng);
                let trd = resample_operator(&self.train_design, Some(&wd), &mut rng);
                operator_norms(&te, &trd, lambda)
            })
            .collect();
        let (norm1_se, norm2_se) = if bootstrap >= 2 {
            (
                sample_sd(&boot.iter().map(|p| p.0).collect::<Vec<_>>()),
                sample_sd(&boot.iter().map(|p| p.1).collect::<Vec<_>>()),
            )
        } else {
            (0.0, 0.0)
        };
        Ok(OperatorCheck {
            threshold,
            lambda,
            norm1,
            norm1_se,
            norm2,
            norm2_se,
            tr_t,
            tr_td,
        })
    }
}

fn resample_operator(design: &DMatrix<f64>, weights: Option<&[f64]>, rng: &mut crate::rng::Rng) -> FeatureOperator {
    let n = design.nrows();
    let p = design.ncols();
    let mut acc = DMatrix::<f64>::zeros(p, p);
    let mut row = vec![0.0; p];
    for _ in 0..n {
        let i = rng.gen_range(0..n);
        let w = weights.map_or(1.0, |w| w[i]);
        for (j, r) in row.iter_mut().enumerate() {
            *r = design[(i, j)];
        }
        for a in 0..p {
            let wa = w * row[a];
            for b in a..p {
                acc[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            acc[(a, b)] = acc[(b, a)];
        }
    }
    FeatureOperator { matrix: acc / n as f64 }
}

pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// One-shot clipped-operator check at a single `(D, lambda)`.
#[allow(clippy::too_many_arguments)]
pub fn clipped_operator_check(
    feature_map: &FeatureMap,
    test: &DensityModel,
    train: &DensityModel,
    threshold: f64,
    lambda: f64,
    mc_size: usize,
    bootstrap: usize,
    seed: u64,
) -> Result<OperatorCheck, SpectrumError> {
    ClippedOperatorSamples::new(feature_map, test, train, mc_size, seed)?.check(threshold, lambda, bootstrap)
}

/// Self-samples `n` points from a density and reports the kernel spectrum.
pub fn spectrum_from_density(
    kernel: &KernelSpec,
    density: &DensityModel,
    n: usize,
    lambda_grid: &[f64],
    seed: u64,
) -> Result<SpectrumReport, SpectrumError> {
    let mut rng = rng_from_seed(seed);
    let xs = density.sample(n, &mut rng);
    spectrum_report(kernel, &xs, lambda_grid)
}
