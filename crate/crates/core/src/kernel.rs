//! Kernel functions, Gram matrices and boundedness normalization.
//!
//! Every kernel carries a multiplicative `scale`. [`KernelSpec::normalize`]
//! picks the scale so that `scale * k(x, x) <= 1` on the Euclidean ball of a
//! given radius, which is the boundedness constant the rest of the crate
//! assumes (trace of the covariance operator at most one).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An input point. Inputs are d-dimensional real vectors.
pub type Point = Vec<f64>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("lengthscale must be positive and finite, got {0}")]
    InvalidLengthscale(f64),
    #[error("polynomial degree must be at least 1")]
    InvalidDegree,
    #[error("polynomial offset must be nonnegative and finite, got {0}")]
    InvalidOffset(f64),
    #[error("Matern smoothness must be one of 0.5, 1.5, 2.5, got {0}")]
    UnsupportedSmoothness(f64),
    #[error("domain bound must be positive and finite, got {0}")]
    InvalidDomainBound(f64),
    #[error("kernel diagonal vanishes on the domain (sup k(x,x) = 0); cannot normalize")]
    DegenerateDomain,
    #[error("point list must be nonempty")]
    EmptyPoints,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Kernel family together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum KernelFamily {
    /// `exp(-|x - y|^2 / lengthscale^2)`
    Gaussian { lengthscale: f64 },
    /// `(<x, y> + offset)^degree`
    Polynomial { degree: u32, offset: f64 },
    /// `<x, y>`
    Linear,
    /// Matern kernel with half-integer smoothness 1/2, 3/2 or 5/2.
    Matern { smoothness: f64, lengthscale: f64 },
}

/// A positive-semidefinite kernel: family, parameters and normalization scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub family: KernelFamily,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_scale() -> f64 {
    1.0
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

impl KernelSpec {
    pub fn new(family: KernelFamily, scale: f64) -> Result<Self, KernelError> {
        let spec = Self { family, scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(lengthscale: f64) -> Result<Self, KernelError> {
        Self::new(KernelFamily::Gaussian { lengthscale }, 1.0)
    }

    pub fn polynomial(degree: u32, offset: f64) -> Result<Self, KernelError> {
        Self::new(KernelFamily::Polynomial { degree, offset }, 1.0)
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            scale: 1.0,
        }
    }

    pub fn matern(smoothness: f64, lengthscale: f64) -> Result<Self, KernelError> {
        Self::new(
            KernelFamily::Matern {
                smoothness,
                lengthscale,
            },
            1.0,
        )
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self, KernelError> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(KernelError::InvalidScale(self.scale));
        }
        match self.family {
            KernelFamily::Gaussian { lengthscale } => check_lengthscale(lengthscale),
            KernelFamily::Polynomial { degree, offset } => {
                if degree < 1 {
                    return Err(KernelError::InvalidDegree);
                }
                if !(offset >= 0.0 && offset.is_finite()) {
                    return Err(KernelError::InvalidOffset(offset));
                }
                Ok(())
            }
            KernelFamily::Linear => Ok(()),
            KernelFamily::Matern {
                smoothness,
                lengthscale,
            } => {
                check_lengthscale(lengthscale)?;
                if matern_order(smoothness).is_none() {
                    return Err(KernelError::UnsupportedSmoothness(smoothness));
                }
                Ok(())
            }
        }
    }

    /// Unscaled kernel value.
    fn raw(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian { lengthscale } => {
                (-sq_dist(x, y) / (lengthscale * lengthscale)).exp()
            }
            KernelFamily::Polynomial { degree, offset } => (dot(x, y) + offset).powi(degree as i32),
            KernelFamily::Linear => dot(x, y),
            KernelFamily::Matern {
                smoothness,
                lengthscale,
            } => {
                let r = sq_dist(x, y).sqrt() / lengthscale;
                match matern_order(smoothness) {
                    Some(0) => (-r).exp(),
                    Some(1) => {
                        let a = 3f64.sqrt() * r;
                        (1.0 + a) * (-a).exp()
                    }
                    Some(2) => {
                        let a = 5f64.sqrt() * r;
                        (1.0 + a + a * a / 3.0) * (-a).exp()
                    }
                    _ => unreachable!("smoothness validated at construction"),
                }
            }
        }
    }

    /// `scale * k(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        // symmetric by construction: every family is a function of |x-y| or <x,y>
        self.scale * self.raw(x, y)
    }

    /// Gram matrix with entries `eval(xs[i], ys[j])`.
    pub fn gram(&self, xs: &[Point], ys: &[Point]) -> Result<GramMatrix, KernelError> {
        if xs.is_empty() || ys.is_empty() {
            return Err(KernelError::EmptyPoints);
        }
        check_dims(xs, ys)?;
        let symmetric = std::ptr::eq(xs, ys) || xs == ys;
        let entries = if symmetric {
            self.gram_symmetric(xs)
        } else {
            self.cross_matrix(xs, ys)
        };
        Ok(GramMatrix {
            entries,
            row_points: xs.to_vec(),
            col_points: ys.to_vec(),
            symmetric,
        })
    }

    /// Plain `n x m` kernel matrix without the bookkeeping of [`GramMatrix`].
    pub fn cross_matrix(&self, xs: &[Point], ys: &[Point]) -> DMatrix<f64> {
        let m = ys.len();
        let rows: Vec<Vec<f64>> = xs
            .par_iter()
            .map(|x| ys.iter().map(|y| self.eval(x, y)).collect())
            .collect();
        DMatrix::from_fn(xs.len(), m, |i, j| rows[i][j])
    }

    fn gram_symmetric(&self, xs: &[Point]) -> DMatrix<f64> {
        let n = xs.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..=i).map(|j| self.eval(&xs[i], &xs[j])).collect())
            .collect();
        DMatrix::from_fn(n, n, |i, j| if j <= i { rows[i][j] } else { rows[j][i] })
    }

    /// `sup_{|x| <= bound} k(x, x)` for the unscaled kernel.
    pub fn raw_diagonal_sup(&self, domain_bound: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian { .. } | KernelFamily::Matern { .. } => 1.0,
            KernelFamily::Polynomial { degree, offset } => {
                (domain_bound * domain_bound + offset).powi(degree as i32)
            }
            KernelFamily::Linear => domain_bound * domain_bound,
        }
    }

    /// Returns a copy whose scale makes `sup_{|x| <= bound} scale * k(x,x) = 1`.
    pub fn normalize(&self, domain_bound: f64) -> Result<KernelSpec, KernelError> {
        if !(domain_bound > 0.0 && domain_bound.is_finite()) {
            return Err(KernelError::InvalidDomainBound(domain_bound));
        }
        let sup = self.raw_diagonal_sup(domain_bound);
        if !(sup > 0.0) || !sup.is_finite() {
            return Err(KernelError::DegenerateDomain);
        }
        KernelSpec::new(self.family.clone(), 1.0 / sup)
    }

    /// Explicit finite feature map, available for linear and polynomial kernels.
    pub fn feature_map(&self, dim: usize) -> Option<FeatureMap> {
        match self.family {
            KernelFamily::Linear => Some(FeatureMap::linear(dim, self.scale)),
            KernelFamily::Polynomial { degree, offset } => {
                Some(FeatureMap::polynomial(dim, degree, offset, self.scale))
            }
            _ => None,
        }
    }

    /// True for kernels whose RKHS is finite dimensional.
    pub fn is_finite_rank(&self) -> bool {
        matches!(
            self.family,
            KernelFamily::Linear | KernelFamily::Polynomial { .. }
        )
    }
}

fn check_lengthscale(l: f64) -> Result<(), KernelError> {
    if l > 0.0 && l.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidLengthscale(l))
    }
}

fn matern_order(smoothness: f64) -> Option<u8> {
    [0.5, 1.5, 2.5]
        .iter()
        .position(|&v| (smoothness - v).abs() < 1e-12)
        .map(|p| p as u8)
}

fn check_dims(xs: &[Point], ys: &[Point]) -> Result<(), KernelError> {
    let d = xs[0].len();
    for p in xs.iter().chain(ys) {
        if p.len() != d {
            return Err(KernelError::DimensionMismatch {
                expected: d,
                found: p.len(),
            });
        }
    }
    Ok(())
}

/// Kernel matrix over two point lists.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub row_points: Vec<Point>,
    pub col_points: Vec<Point>,
    symmetric: bool,
}

impl GramMatrix {
    pub fn is_symmetric_case(&self) -> bool {
        self.symmetric
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    /// Smallest eigenvalue of the symmetrized matrix. Square case only.
    pub fn min_eigenvalue(&self) -> Option<f64> {
        if self.nrows() != self.ncols() {
            return None;
        }
        let sym = (&self.entries + self.entries.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(sym);
        eig.eigenvalues.iter().cloned().reduce(f64::min)
    }
}

/// Explicit feature map `phi` with `<phi(x), phi(y)> = k(x, y)` (scale included).
///
/// Polynomial features are the multinomial expansion of `(<x,y> + c)^m`:
/// one feature per multi-index `(k_0, k_1, .., k_d)` summing to `m`, with
/// coefficient `sqrt(scale * m! / (k_0! .. k_d!) * c^{k_0})`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    dim: usize,
    /// exponents of x_1..x_d for each feature
    exponents: Vec<Vec<u32>>,
    coefs: Vec<f64>,
}

impl FeatureMap {
    fn linear(dim: usize, scale: f64) -> Self {
        let exponents = (0..dim)
            .map(|i| {
                let mut e = vec![0; dim];
                e[i] = 1;
                e
            })
            .collect();
        Self {
            dim,
            exponents,
            coefs: vec![scale.sqrt(); dim],
        }
    }

    fn polynomial(dim: usize, degree: u32, offset: f64, scale: f64) -> Self {
        let mut exponents = Vec::new();
        let mut coefs = Vec::new();
        let mut current = vec![0u32; dim];
        enumerate_multi_indices(dim, degree, 0, &mut current, &mut |e| {
            let used: u32 = e.iter().sum();
            let k0 = degree - used;
            if offset == 0.0 && k0 > 0 {
                return;
            }
            let mut log_multinom = ln_factorial(degree) - ln_factorial(k0);
            for &k in e {
                log_multinom -= ln_factorial(k);
            }
            let c_pow = if k0 == 0 { 1.0 } else { offset.powi(k0 as i32) };
            let coef = (scale * log_multinom.exp() * c_pow).sqrt();
            exponents.push(e.to_vec());
            coefs.push(coef);
        });
        Self {
            dim,
            exponents,
            coefs,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    /// Number of features `p`.
    pub fn len(&self) -> usize {
        self.coefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefs.is_empty()
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.exponents.iter().zip(&self.coefs).map(|(e, c)| {
                c * e
                    .iter()
                    .zip(x)
                    .map(|(&k, &xi)| xi.powi(k as i32))
                    .product::<f64>()
            }),
        )
    }

    /// `n x p` design matrix with rows `phi(x_i)`.
    pub fn design(&self, xs: &[Point]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(xs.len(), self.len());
        for (i, x) in xs.iter().enumerate() {
            out.row_mut(i).copy_from(&self.eval(x).transpose());
        }
        out
    }
}

fn enumerate_multi_indices(
    dim: usize,
    budget: u32,
    pos: usize,
    current: &mut Vec<u32>,
    visit: &mut dyn FnMut(&[u32]),
) {
    if pos == dim {
        visit(current);
        return;
    }
    for k in 0..=budget {
        current[pos] = k;
        enumerate_multi_indices(dim, budget - k, pos + 1, current, visit);
    }
    current[pos] = 0;
}

fn ln_factorial(k: u32) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}
