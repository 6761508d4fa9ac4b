//! Regularization and clipping schedules with their rate exponents and bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("parameter {name} = {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("clipping needs q > 0; with q = 0 the weights are bounded and the plain schedule applies")]
    ClippingDegenerate,
    #[error("moment order m must be at least 2, got {0}")]
    InvalidMomentOrder(u32),
    #[error("sample size must be at least 1")]
    InvalidSampleSize,
}

fn check(name: &'static str, value: f64, ok: bool, range: &'static str) -> Result<(), ScheduleError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ScheduleError::OutOfRange { name, value, range })
    }
}

/// Constants of a generic weighting function `v = d rho' / d rho_tr`,
/// playing the roles of `(r, s, q, W, sigma, E_s, R, |f_H|_H)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimedParams {
    pub r: f64,
    pub s: f64,
    pub q: f64,
    pub v: f64,
    pub gamma: f64,
    pub es: f64,
    pub r_norm: f64,
    /// `|f'_H|_H`.
    pub f_h_norm: f64,
}

impl PrimedParams {
    /// Standard unweighted KRR: `v = 1`, so `q' = 0` and `V = gamma = 1`.
    pub fn uniform_weights(r: f64, s: f64, es: f64, r_norm: f64) -> Self {
        Self {
            r,
            s,
            q: 0.0,
            v: 1.0,
            gamma: 1.0,
            es,
            r_norm,
            f_h_norm: r_norm,
        }
    }
}

/// Constants appearing in the rate theorems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    /// Source condition exponent, in `[1/2, 1]`.
    pub r: f64,
    /// Capacity exponent, in `[0, 1]`.
    pub s: f64,
    /// Weight moment degree, in `[0, 1]`.
    pub q: f64,
    #[serde(rename = "W")]
    pub w: f64,
    pub sigma: f64,
    #[serde(rename = "E_s")]
    pub es: f64,
    pub delta: f64,
    /// Output bound `M`.
    #[serde(rename = "M")]
    pub m_bound: f64,
    /// Source condition norm `R`.
    #[serde(rename = "R")]
    pub r_norm: f64,
    /// `|f_H|_H`; defaults to `R`.
    #[serde(default)]
    pub f_h_norm: Option<f64>,
    /// `|f_rho|` in `L2(rho_te)`, used by the clipped bound.
    #[serde(default = "one")]
    pub f_rho_norm_te: f64,
    /// `|f_H|` in `L2(rho_te)`, used by the clipped bound.
    #[serde(default = "one")]
    pub f_h_norm_te: f64,
    /// Discrepancy constant `G >= 1` between `rho_te` and `rho'`.
    #[serde(rename = "G", default = "one")]
    pub g: f64,
    #[serde(default)]
    pub primed: Option<PrimedParams>,
}

fn one() -> f64 {
    1.0
}

impl Default for RateParams {
    fn default() -> Self {
        Self {
            r: 0.5,
            s: 0.0,
            q: 0.0,
            w: 1.0,
            sigma: 1.0,
            es: 1.0,
            delta: 0.1,
            m_bound: 1.0,
            r_norm: 1.0,
            f_h_norm: None,
            f_rho_norm_te: 1.0,
            f_h_norm_te: 1.0,
            g: 1.0,
            primed: None,
        }
    }
}

impl RateParams {
    pub fn new(r: f64, s: f64, q: f64) -> Self {
        Self {
            r,
            s,
            q,
            ..Self::default()
        }
    }

    /// Finite-rank kernel with `N(lambda) <= n_rank`: `s = 0` and `E_0 = sqrt(N)`.
    pub fn finite_rank(r: f64, q: f64, n_rank: usize) -> Self {
        Self {
            r,
            s: 0.0,
            q,
            es: (n_rank.max(1) as f64).sqrt(),
            ..Self::default()
        }
    }

    /// RKHS norm-equivalent to a Sobolev space of order `eta > d/2`: `s = d / (2 eta)`.
    pub fn sobolev(r: f64, q: f64, eta: f64, d: usize) -> Result<Self, ScheduleError> {
        check("eta", eta, eta > d as f64 / 2.0, "(d/2, inf)")?;
        Ok(Self {
            r,
            s: d as f64 / (2.0 * eta),
            q,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        check("r", self.r, (0.5..=1.0).contains(&self.r), "[1/2, 1]")?;
        check("s", self.s, (0.0..=1.0).contains(&self.s), "[0, 1]")?;
        check("q", self.q, (0.0..=1.0).contains(&self.q), "[0, 1]")?;
        check("W", self.w, self.w > 0.0, "(0, inf)")?;
        check("sigma", self.sigma, self.sigma > 0.0, "(0, inf)")?;
        check("E_s", self.es, self.es >= 1.0, "[1, inf)")?;
        check("delta", self.delta, self.delta > 0.0 && self.delta < 1.0, "(0, 1)")?;
        check("M", self.m_bound, self.m_bound > 0.0, "(0, inf)")?;
        check("R", self.r_norm, self.r_norm > 0.0, "(0, inf)")?;
        check("G", self.g, self.g >= 1.0, "[1, inf)")?;
        if let Some(h) = self.f_h_norm {
            check("f_h_norm", h, h >= 0.0, "[0, inf)")?;
        }
        if let Some(p) = &self.primed {
            check("r'", p.r, (0.5..=1.0).contains(&p.r), "[1/2, 1]")?;
            check("s'", p.s, (0.0..=1.0).contains(&p.s), "[0, 1]")?;
            check("q'", p.q, (0.0..=1.0).contains(&p.q), "[0, 1]")?;
            check("V", p.v, p.v > 0.0, "(0, inf)")?;
            check("gamma", p.gamma, p.gamma > 0.0, "(0, inf)")?;
            check("E'_s'", p.es, p.es >= 1.0, "[1, inf)")?;
            check("R'", p.r_norm, p.r_norm > 0.0, "(0, inf)")?;
        }
        Ok(())
    }

    pub fn f_h(&self) -> f64 {
        self.f_h_norm.unwrap_or(self.r_norm)
    }

    /// `A = s (1 - q) + q`.
    pub fn a(&self) -> f64 {
        a_const(self.s, self.q)
    }

    fn log_term(&self) -> f64 {
        (6.0 / self.delta).ln()
    }

    /// The primed constants, or the unprimed ones when `rho' = rho_te`.
    pub fn primed_or_self(&self) -> PrimedParams {
        self.primed.unwrap_or(PrimedParams {
            r: self.r,
            s: self.s,
            q: self.q,
            v: self.w,
            gamma: self.sigma,
            es: self.es,
            r_norm: self.r_norm,
            f_h_norm: self.f_h(),
        })
    }
}

pub fn a_const(s: f64, q: f64) -> f64 {
    s * (1.0 - q) + q
}

/// `beta = 1 / (2r + s(1-q) + q)`.
pub fn iw_beta(r: f64, s: f64, q: f64) -> f64 {
    1.0 / (2.0 * r + a_const(s, q))
}

/// Error rate exponent `r beta` in `|f - f_H| = O(n^{-r beta})`.
pub fn rate_exponent(params: &RateParams) -> f64 {
    params.r * iw_beta(params.r, params.s, params.q)
}

/// Classification excess-risk exponent `2 r beta / (2 - alpha)`.
pub fn classification_rate_exponent(params: &RateParams, alpha: f64) -> f64 {
    2.0 * rate_exponent(params) / (2.0 - alpha)
}

/// Smallest admissible `c`, `(64 (W + sigma^2) E^{2(1-q)} ln^2(6/delta))^{1/(1+A)}`.
fn c_lower_bound(w: f64, sigma: f64, es: f64, s: f64, q: f64, delta: f64) -> f64 {
    let l = (6.0 / delta).ln();
    (64.0 * (w + sigma * sigma) * es.powf(2.0 * (1.0 - q)) * l * l).powf(1.0 / (1.0 + a_const(s, q)))
}

/// Clipping part of a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clipping {
    pub tau: f64,
    pub c1: f64,
    pub c2: f64,
    /// Smallest `c2` admissible for this `c1`.
    pub c2_min: f64,
    pub m: u32,
    pub epsilon: f64,
}

impl Clipping {
    pub fn d_at(&self, n: usize) -> f64 {
        self.c2 * (n as f64).powf(self.tau)
    }
}

/// `lambda = c n^{-beta}`, optionally with `D = c2 n^tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub beta: f64,
    pub c: f64,
    /// Smallest admissible `c`, recorded even when `c` was overridden.
    pub c_min: f64,
    /// Error rate exponent of the schedule.
    pub rate: f64,
    pub n: usize,
    pub lambda: f64,
    /// `lambda <= 1`.
    pub feasible: bool,
    pub clipping: Option<Clipping>,
    /// Clipped side condition at `n`; `None` without clipping.
    pub side_condition: Option<bool>,
}

impl Schedule {
    pub fn lambda_at(&self, n: usize) -> f64 {
        self.c * (n as f64).powf(-self.beta)
    }

    pub fn d_at(&self, n: usize) -> Option<f64> {
        self.clipping.map(|c| c.d_at(n))
    }
}

/// One row of a schedule table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub n: usize,
    pub lambda: f64,
    pub d: Option<f64>,
    pub feasible: bool,
    pub side_condition: Option<bool>,
}

impl From<&Schedule> for ScheduleRow {
    fn from(s: &Schedule) -> Self {
        Self {
            n: s.n,
            lambda: s.lambda,
            d: s.d_at(s.n),
            feasible: s.feasible,
            side_condition: s.side_condition,
        }
    }
}

fn check_n(n: usize) -> Result<(), ScheduleError> {
    if n == 0 {
        Err(ScheduleError::InvalidSampleSize)
    } else {
        Ok(())
    }
}

fn plain_schedule(r: f64, s: f64, q: f64, c_min: f64, c: Option<f64>, n: usize) -> Result<Schedule, ScheduleError> {
    if let Some(c) = c {
        check("c", c, c > 0.0, "(0, inf)")?;
    }
    let beta = iw_beta(r, s, q);
    let c = c.unwrap_or(c_min);
    let lambda = c * (n as f64).powf(-beta);
    Ok(Schedule {
        beta,
        c,
        c_min,
        rate: r * beta,
        n,
        lambda,
        feasible: lambda <= 1.0,
        clipping: None,
        side_condition: None,
    })
}

/// Schedule for the true importance weights; `c` defaults to its lower bound.
pub fn iw_schedule(params: &RateParams, n: usize, c: Option<f64>) -> Result<Schedule, ScheduleError> {
    params.validate()?;
    check_n(n)?;
    let p = params;
    let c_min = c_lower_bound(p.w, p.sigma, p.es, p.s, p.q, p.delta);
    plain_schedule(p.r, p.s, p.q, c_min, c, n)
}

/// Schedule for a generic weighting function with the primed constants.
pub fn generic_schedule(params: &RateParams, n: usize, c: Option<f64>) -> Result<Schedule, ScheduleError> {
    params.validate()?;
    check_n(n)?;
    let p = params.primed_or_self();
    let c_min = c_lower_bound(p.v, p.gamma, p.es, p.s, p.q, params.delta);
    plain_schedule(p.r, p.s, p.q, c_min, c, n)
}

/// `(beta, tau)` of the clipped schedule.
pub fn clipped_exponents(r: f64, s: f64, q: f64, m: u32, epsilon: f64) -> (f64, f64) {
    let m1 = (m - 1) as f64;
    let denom = (s + 2.0 * r) * m1 + 4.0 * q * r + epsilon;
    (m1 / denom, 4.0 * q * r / denom)
}

fn factorial(m: u32) -> f64 {
    (1..=m).map(|k| k as f64).product()
}

/// Moment-bound constant `2^{2q-1} E_s^{2q} m! W^{m-2} sigma^2` shared by
/// the clipping constraint and the clipped-operator lemma.
fn clipping_base(params: &RateParams, m: u32) -> f64 {
    let q = params.q;
    2f64.powf(2.0 * q - 1.0)
        * params.es.powf(2.0 * q)
        * factorial(m)
        * params.w.powi(m as i32 - 2)
        * params.sigma
        * params.sigma
}

/// Smallest `c2` for a given `c1`.
pub fn c2_lower_bound(params: &RateParams, m: u32, c1: f64) -> f64 {
    let m1 = (m - 1) as f64;
    clipping_base(params, m).powf(1.0 / m1) * c1.powf(-(1.0 + params.s) * params.q / m1)
}

/// Threshold `D` at which the clipped-operator lemma applies for a given `lambda`.
pub fn lemma_threshold(params: &RateParams, m: u32, lambda: f64) -> f64 {
    c2_lower_bound(params, m, lambda)
}

/// Left side of the clipped side condition at `n`.
pub fn clipped_side_value(params: &RateParams, m: u32, epsilon: f64, c1: f64, c2: f64, n: usize) -> f64 {
    let (r, s, q) = (params.r, params.s, params.q);
    let m1 = (m - 1) as f64;
    let expo = (m1 * (2.0 * r - 1.0) + epsilon) / (2.0 * ((s + 2.0 * r) * m1 + 4.0 * q * r + epsilon));
    params.es * c1.powf(-(1.0 + s) / 2.0) * c2.sqrt() * (n as f64).powf(-expo)
}

/// Right side `3 / (32 ln(6/delta))` of the clipped side condition.
pub fn clipped_side_bound(params: &RateParams) -> f64 {
    3.0 / (32.0 * params.log_term())
}

pub const DEFAULT_MOMENT_ORDER: u32 = 10;
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Joint schedule of `lambda = c1 n^{-beta}` and `D = c2 n^tau`.
///
/// `c1` defaults to 1 and `c2` to its lower bound given `c1`.
pub fn clipped_schedule(
    params: &RateParams,
    m: u32,
    epsilon: f64,
    n: usize,
    c1: Option<f64>,
    c2: Option<f64>,
) -> Result<Schedule, ScheduleError> {
    params.validate()?;
    check_n(n)?;
    if params.q <= 0.0 {
        return Err(ScheduleError::ClippingDegenerate);
    }
    if m < 2 {
        return Err(ScheduleError::InvalidMomentOrder(m));
    }
    check("epsilon", epsilon, epsilon > 0.0, "(0, inf)")?;
    let c1 = c1.unwrap_or(1.0);
    check("c1", c1, c1 > 0.0, "(0, inf)")?;
    let c2_min = c2_lower_bound(params, m, c1);
    let c2 = c2.unwrap_or(c2_min);
    check("c2", c2, c2 > 0.0, "(0, inf)")?;
    let (beta, tau) = clipped_exponents(params.r, params.s, params.q, m, epsilon);
    let lambda = c1 * (n as f64).powf(-beta);
    let side = clipped_side_value(params, m, epsilon, c1, c2, n) <= clipped_side_bound(params);
    Ok(Schedule {
        beta,
        c: c1,
        c_min: c1,
        rate: params.r * beta,
        n,
        lambda,
        feasible: lambda <= 1.0,
        clipping: Some(Clipping {
            tau,
            c1,
            c2,
            c2_min,
            m,
            epsilon,
        }),
        side_condition: Some(side),
    })
}

/// Which error bound to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "theorem", rename_all = "snake_case")]
pub enum BoundKind {
    /// True importance weights with `c` (lower bound if `None`).
    Thm1 { c: Option<f64> },
    /// Generic weights; `bias` is `|f'_H - f_H|` in `L2(rho_te)`.
    Thm2 { c: Option<f64>, bias: f64 },
    /// Clipped weights.
    Thm4 {
        m: u32,
        epsilon: f64,
        c1: Option<f64>,
        c2: Option<f64>,
    },
}

/// The three constants of the clipped bound.
pub fn clipped_constants(params: &RateParams, m: u32) -> (f64, f64, f64) {
    let q = params.q;
    let a1 = (params.f_rho_norm_te + params.f_h_norm_te)
        * (2f64.powf(6.0 * q - 1.0) * factorial(m) * params.w.powi(m as i32 - 2) * params.sigma * params.sigma)
            .powf(1.0 / (2.0 * q));
    let a2 = 2f64.sqrt() * 16.0 * (params.m_bound + params.f_h()) * params.log_term();
    (a1, a2, a2 * params.es)
}

/// Right side of the chosen error bound at sample size `n`.
pub fn bound_value(params: &RateParams, n: usize, which: BoundKind) -> Result<f64, ScheduleError> {
    let l = params.log_term();
    match which {
        BoundKind::Thm1 { c } => {
            let s = iw_schedule(params, n, c)?;
            let p = params;
            let stoch = 16.0 * (p.m_bound + p.f_h()) * (p.w + p.sigma * p.es.powf(1.0 - p.q)) * s.c.powf(-p.a() / 2.0) * l;
            Ok((n as f64).powf(-s.rate) * (stoch + s.c.powf(p.r) * p.r_norm))
        }
        BoundKind::Thm2 { c, bias } => {
            check("bias", bias, bias >= 0.0, "[0, inf)")?;
            let s = generic_schedule(params, n, c)?;
            let p = params.primed_or_self();
            let a = a_const(p.s, p.q);
            let stoch = 16.0 * (params.m_bound + p.f_h_norm) * (p.v + p.gamma * p.es.powf(1.0 - p.q)) * s.c.powf(-a / 2.0) * l;
            Ok((n as f64).powf(-s.rate) * params.g.sqrt() * (stoch + s.c.powf(p.r) * p.r_norm) + bias)
        }
        BoundKind::Thm4 { m, epsilon, c1, c2 } => {
            let s = clipped_schedule(params, m, epsilon, n, c1, c2)?;
            let clip = s.clipping.expect("clipped schedule");
            let (a1, a2, a3) = clipped_constants(params, m);
            let q = params.q;
            let (c1, c2) = (clip.c1, clip.c2);
            let inner = a1 * c2.powf(-((m - 1) as f64) / (2.0 * q))
                + a2 * c1.powf(-0.5) * c2
                + a3 * c1.powf(-params.s / 2.0) * c2.sqrt()
                + 2f64.powf(params.r) * params.r_norm * c1.powf(params.r);
            Ok((n as f64).powf(-s.rate) * inner)
        }
    }
}

/// Schedule table over a grid of sample sizes.
pub fn schedule_table(
    params: &RateParams,
    n_grid: &[usize],
    clipping: Option<(u32, f64)>,
    c: Option<f64>,
    c2: Option<f64>,
) -> Result<Vec<ScheduleRow>, ScheduleError> {
    n_grid
        .iter()
        .map(|&n| {
            let s = match clipping {
                Some((m, eps)) => clipped_schedule(params, m, eps, n, c, c2)?,
                None => iw_schedule(params, n, c)?,
            };
            Ok(ScheduleRow::from(&s))
        })
        .collect()
}
