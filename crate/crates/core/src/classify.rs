//! Binary classification by the sign of a regression fit.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::Point;
use crate::rng::{rng_from_seed, Rng};
use crate::solver::FitModel;
use crate::spectrum::linear_fit;
use crate::weights::{DensityModel, McEstimate};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("labels must be -1 or +1 (index {index}, value {value})")]
    InvalidLabel { index: usize, value: i8 },
    #[error("{0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty data")]
    Empty,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub xs: Vec<Point>,
    pub labels: Vec<i8>,
}

impl LabeledSet {
    pub fn new(xs: Vec<Point>, labels: Vec<i8>) -> Result<Self, ClassifyError> {
        if xs.len() != labels.len() {
            return Err(ClassifyError::LengthMismatch(xs.len(), labels.len()));
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l != 1 && l != -1) {
            return Err(ClassifyError::InvalidLabel { index, value });
        }
        Ok(Self { xs, labels })
    }

    pub fn labels_as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }
}

/// `+1` where `v >= 0`, `-1` otherwise.
pub fn sign_label(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn sign_of_values(values: &[f64]) -> Vec<i8> {
    values.iter().map(|&v| sign_label(v)).collect()
}

/// Sign of the fitted predictor; ties go to `+1`.
pub fn sign_classify(model: &FitModel, xs: &[Point]) -> Vec<i8> {
    sign_of_values(&model.predict(xs))
}

/// Fraction of mismatched labels.
pub fn empirical_risk(predicted: &[i8], labels: &[i8]) -> Result<f64, ClassifyError> {
    if predicted.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch(predicted.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(ClassifyError::Empty);
    }
    let wrong = predicted.iter().zip(labels).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Conditional label distribution `rho(y = 1 | x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LabelModel {
    /// `rho(1|x) = 1 / (1 + exp(-(slope x_0 + shift)))`.
    Logistic { slope: f64, shift: f64 },
    /// Label is `sign(x_0 - threshold)` flipped with probability `flip`.
    ThresholdFlip { threshold: f64, flip: f64 },
}

impl LabelModel {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        match *self {
            LabelModel::Logistic { slope, shift } if slope.is_finite() && shift.is_finite() => Ok(()),
            LabelModel::ThresholdFlip { threshold, flip }
                if threshold.is_finite() && (0.0..=0.5).contains(&flip) =>
            {
                Ok(())
            }
            _ => Err(ClassifyError::InvalidParameter(format!("{self:?}"))),
        }
    }

    pub fn prob_positive(&self, x: &[f64]) -> f64 {
        match *self {
            LabelModel::Logistic { slope, shift } => 1.0 / (1.0 + (-(slope * x[0] + shift)).exp()),
            LabelModel::ThresholdFlip { threshold, flip } => {
                if x[0] >= threshold {
                    1.0 - flip
                } else {
                    flip
                }
            }
        }
    }

    /// Regression function `f_rho = rho(1|x) - rho(-1|x)`.
    pub fn f_rho(&self, x: &[f64]) -> f64 {
        2.0 * self.prob_positive(x) - 1.0
    }

    pub fn sample_label(&self, x: &[f64], rng: &mut Rng) -> i8 {
        if rng.gen::<f64>() < self.prob_positive(x) {
            1
        } else {
            -1
        }
    }

    pub fn sample_labels(&self, xs: &[Point], rng: &mut Rng) -> Vec<i8> {
        xs.iter().map(|x| self.sample_label(x, rng)).collect()
    }
}

/// Monte-Carlo Bayes risk `E[min(rho(1|x), rho(-1|x))]` over a test sample.
pub fn bayes_risk_estimate(model: &LabelModel, xs: &[Point]) -> Result<McEstimate, ClassifyError> {
    if xs.is_empty() {
        return Err(ClassifyError::Empty);
    }
    let v: Vec<f64> = xs
        .iter()
        .map(|x| {
            let p = model.prob_positive(x);
            p.min(1.0 - p)
        })
        .collect();
    Ok(mean_and_se(&v))
}

pub(crate) fn mean_and_se(v: &[f64]) -> McEstimate {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    McEstimate {
        estimate: mean,
        stderr: (var / n).sqrt(),
    }
}

/// `4 c_alpha d^{2 / (2 - alpha)}`.
pub fn excess_risk_bound(l2_dist: f64, alpha: f64, c_alpha: f64) -> Result<f64, ClassifyError> {
    if !(l2_dist >= 0.0) || !(0.0..1.0).contains(&alpha) || !(c_alpha > 0.0) {
        return Err(ClassifyError::InvalidParameter(format!(
            "l2_dist = {l2_dist}, alpha = {alpha}, c_alpha = {c_alpha}"
        )));
    }
    Ok(4.0 * c_alpha * l2_dist.powf(2.0 / (2.0 - alpha)))
}

/// Empirical margin masses and the fitted noise condition `mass <= B_l Delta^l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub grid: Vec<(f64, f64)>,
    pub b_l: Option<f64>,
    pub l: Option<f64>,
    pub alpha: Option<f64>,
    pub c_alpha: Option<f64>,
    /// Every sampled `|f_rho|` exceeds the grid, so no exponent can be fitted.
    pub degenerate: bool,
    pub mc_size: usize,
    pub seed: u64,
}

/// Masses `rho_te{|f_rho| <= Delta}` on one shared sample, with a log-log fit
/// over the grid points of positive mass.
pub fn margin_report(
    f_rho: &dyn Fn(&[f64]) -> f64,
    test: &DensityModel,
    delta_grid: &[f64],
    mc_size: usize,
    seed: u64,
) -> Result<MarginReport, ClassifyError> {
    if delta_grid.is_empty() || delta_grid.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
        return Err(ClassifyError::InvalidParameter("margin grid must lie in (0, 1]".into()));
    }
    if mc_size == 0 {
        return Err(ClassifyError::Empty);
    }
    let mut rng = rng_from_seed(seed);
    let mut abs: Vec<f64> = test.sample(mc_size, &mut rng).iter().map(|x| f_rho(x).abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).expect("finite regression function"));
    let grid: Vec<(f64, f64)> = delta_grid
        .iter()
        .map(|&d| {
            let count = abs.partition_point(|&v| v <= d);
            (d, count as f64 / mc_size as f64)
        })
        .collect();
    let positive: Vec<(f64, f64)> = grid
        .iter()
        .filter(|(_, m)| *m > 0.0)
        .map(|&(d, m)| (d.ln(), m.ln()))
        .collect();
    let distinct_deltas = {
        let mut d: Vec<f64> = positive.iter().map(|p| p.0).collect();
        d.dedup();
        d.len()
    };
    if distinct_deltas < 2 {
        return Ok(MarginReport {
            grid,
            b_l: None,
            l: None,
            alpha: None,
            c_alpha: None,
            degenerate: positive.is_empty(),
            mc_size,
            seed,
        });
    }
    let (slope, intercept, _) = linear_fit(&positive);
    let l = slope.max(0.0);
    let b_l = intercept.exp();
    Ok(MarginReport {
        grid,
        b_l: Some(b_l),
        l: Some(l),
        alpha: Some(l / (l + 1.0)),
        c_alpha: Some(b_l + 1.0),
        degenerate: false,
        mc_size,
        seed,
    })
}
