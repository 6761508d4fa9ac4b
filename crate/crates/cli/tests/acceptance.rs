//! Acceptance criteria 1 to 11. Each test prints one line
//! `criterion N [PASS|FAIL] <name>: <detail>` and then asserts.
//!
//! Reference values are computed here, independently of the library code
//! under test: closed-form moments, hand-assembled linear systems and
//! defining formulas.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use iwkrr::classify::sign_of_values;
use iwkrr::experiments::{
    paired_comparison, quantile_radius, run_classify_sim, run_gaussian_sim, run_polynomial_sim,
    run_projection_study, run_rate_study, ClassifySimConfig, ProjectionStudyConfig, RateStudyConfig,
    TargetFunction,
};
use iwkrr::oracle::{bias_term, random_instance, solver_oracle_agreement};
use iwkrr::rng::{derive_seed, rng_from_seed};
use iwkrr::schedule::{clipped_schedule, iw_schedule, lemma_threshold, rate_exponent, RateParams};
use iwkrr::solver::{fit_with_weights, FitOptions};
use iwkrr::spectrum::{effective_dimension, empirical_eigs, estimate_decay, log_grid, ClippedOperatorSamples};
use iwkrr::{DensityModel, FitModel, KernelSpec, Point, TrainingSet, WeightStrategy};

// tolerances, as stated by the criteria
const C1_PREDICTOR_REL: f64 = 1e-8;
const C1_OBJECTIVE_REL: f64 = 1e-10;
const C1_RUNTIME: Duration = Duration::from_secs(30);
const C2_IDENTITY: f64 = 1e-10;
const C3_FORMULA: f64 = 1e-12;
const C4_SLOPE: (f64, f64) = (-1.3, -0.7);
const C4_RUNTIME: Duration = Duration::from_secs(300);
const C5_WIN_FRACTION: f64 = 0.8;
const C5_K1_RATIO: f64 = 1.2;
const C5_RUNTIME: Duration = Duration::from_secs(600);
const C6_SIGN_P: f64 = 0.01;
const C6_RUNTIME: Duration = Duration::from_secs(300);
const C7_BIAS_SE_MULT: f64 = 10.0;
const C7_CLOSER_FRACTION: f64 = 0.9;
const C7_ZERO_SE_MULT: f64 = 3.0;
const C8_TRACE: f64 = 1.0 + 1e-8;
const C8_DECAY: f64 = 0.02;
const C9_SE_MULT: f64 = 3.0;
const C9_TRACE: f64 = 1e-6;
const C10_SE_MULT: f64 = 3.0;

/// Fixed before any run; never tuned.
const SEED: u64 = 20240;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

/// `max |f - g| / max |g|` over a grid.
fn rel_gap(f: impl Fn(&[f64]) -> f64, g: impl Fn(&[f64]) -> f64, grid: &[Point]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for x in grid {
        diff = diff.max((f(x) - g(x)).abs());
        scale = scale.max(g(x).abs());
    }
    diff / scale.max(f64::MIN_POSITIVE)
}

fn model_gap(a: &FitModel, b: &FitModel, grid: &[Point]) -> f64 {
    rel_gap(|x| a.predict_one(x), |x| b.predict_one(x), grid)
}

#[test]
fn criterion_01_solver_matches_oracle() {
    let start = Instant::now();
    let s = solver_oracle_agreement(100, SEED).unwrap();
    let elapsed = start.elapsed();
    let pass = s.instances == 100
        && s.worst_predictor_rel <= C1_PREDICTOR_REL
        && s.worst_objective_rel <= C1_OBJECTIVE_REL
        && elapsed < C1_RUNTIME;
    report(
        1,
        "solver-oracle equivalence",
        pass,
        &format!(
            "100 instances, worst predictor rel {:.2e} (<= {C1_PREDICTOR_REL:e}), worst objective rel {:.2e} (<= {C1_OBJECTIVE_REL:e}), {:.1}s",
            s.worst_predictor_rel,
            s.worst_objective_rel,
            elapsed.as_secs_f64()
        ),
    );
}

/// Standard KRR `(K + n lambda I)^{-1} y` by LU, assembled here.
fn standard_krr(kernel: &KernelSpec, data: &TrainingSet, lambda: f64) -> impl Fn(&[f64]) -> f64 {
    let n = data.len();
    let k = DMatrix::from_fn(n, n, |i, j| kernel.eval(&data.xs[i], &data.xs[j]));
    let sys = k + DMatrix::identity(n, n) * (n as f64 * lambda);
    let alpha = sys.lu().solve(&DVector::from_column_slice(&data.ys)).unwrap();
    let xs = data.xs.clone();
    let kernel = kernel.clone();
    move |x: &[f64]| (0..n).map(|i| alpha[i] * kernel.eval(x, &xs[i])).sum()
}

#[test]
fn criterion_02_reduction_identities() {
    let mut worst = [0.0f64; 4];
    for i in 0..20u64 {
        let inst = random_instance(derive_seed(SEED, &[2, i]));
        let (k, data, lambda, grid) = (&inst.kernel, &inst.data, inst.lambda, &inst.grid);
        let n = data.len();
        let positive: Vec<f64> = inst.weights.iter().map(|w| w.max(0.2)).collect();

        let uniform = fit_with_weights(k, data, &vec![1.0; n], lambda, FitOptions::dual()).unwrap();
        let reference = standard_krr(k, data, lambda);
        worst[0] = worst[0].max(rel_gap(|x| uniform.predict_one(x), &reference, grid));

        let base = fit_with_weights(k, data, &positive, lambda, FitOptions::dual()).unwrap();
        let dmax = positive.iter().cloned().fold(0.0, f64::max);
        let clipped: Vec<f64> = positive.iter().map(|w| w.min(dmax)).collect();
        let clip_fit = fit_with_weights(k, data, &clipped, lambda, FitOptions::dual()).unwrap();
        worst[1] = worst[1].max(model_gap(&clip_fit, &base, grid));

        let c = 0.37 + 2.0 * (i as f64);
        let scaled_w: Vec<f64> = positive.iter().map(|w| c * w).collect();
        let scaled = fit_with_weights(k, data, &scaled_w, c * lambda, FitOptions::dual()).unwrap();
        worst[2] = worst[2].max(model_gap(&scaled, &base, grid));

        // an extra zero-weight point, with n lambda held fixed
        let mut xs = data.xs.clone();
        let mut ys = data.ys.clone();
        xs.push(vec![0.3; data.dim()]);
        ys.push(17.0);
        let mut wz = positive.clone();
        wz.push(0.0);
        let extended = TrainingSet::new(xs, ys).unwrap();
        let zero = fit_with_weights(k, &extended, &wz, lambda * n as f64 / (n + 1) as f64, FitOptions::dual()).unwrap();
        worst[3] = worst[3].max(model_gap(&zero, &base, grid));
    }
    let pass = worst.iter().all(|&g| g <= C2_IDENTITY);
    report(
        2,
        "reduction identities",
        pass,
        &format!(
            "20 instances, max rel gaps: uniform=KRR {:.1e}, inactive clip {:.1e}, joint scaling {:.1e}, zero weight {:.1e} (<= {C2_IDENTITY:e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

#[test]
fn criterion_03_schedule_formulas() {
    let mut fails = Vec::new();
    let mut check = |what: String, got: f64, want: f64| {
        if (got - want).abs() > C3_FORMULA {
            fails.push(format!("{what}: {got} vs {want}"));
        }
    };
    for &r in &[0.5, 0.75, 1.0] {
        for &s in &[0.0, 0.3, 1.0] {
            check(format!("q=0 r={r} s={s}"), rate_exponent(&RateParams::new(r, s, 0.0)), r / (2.0 * r + s));
            check(format!("q=1 r={r} s={s}"), rate_exponent(&RateParams::new(r, s, 1.0)), r / (2.0 * r + 1.0));
        }
    }
    for rank in [1, 3, 10] {
        check(format!("finite rank N={rank}"), rate_exponent(&RateParams::finite_rank(0.5, 0.0, rank)), 0.5);
    }
    for (eta, d) in [(1.0, 1), (2.0, 1), (2.0, 3), (3.5, 2)] {
        let p = RateParams::sobolev(0.5, 0.0, eta, d).unwrap();
        check(format!("sobolev eta={eta} d={d}"), rate_exponent(&p), eta / (2.0 * eta + d as f64));
    }
    let s1 = iw_schedule(&RateParams::new(0.5, 0.0, 0.0), 1000, None).unwrap();
    check("beta r=1/2 s=0 q=0".into(), s1.beta, 1.0);

    // 20-point grid over (r, s, q, m, epsilon) against the defining fractions
    let mut points = 0;
    for (i, &(r, s, q)) in [(0.5, 0.0, 0.5), (0.5, 0.5, 1.0), (0.75, 0.2, 0.3), (1.0, 1.0, 1.0), (0.6, 0.8, 0.9)]
        .iter()
        .enumerate()
    {
        for (j, &(m, eps)) in [(2u32, 0.01), (5, 0.1), (10, 0.01), (40, 0.5)].iter().enumerate() {
            let params = RateParams::new(r, s, q);
            let sched = clipped_schedule(&params, m, eps, 1000, Some(1.0), Some(1.0)).unwrap();
            let denom = (s + 2.0 * r) * (m as f64 - 1.0) + 4.0 * q * r + eps;
            check(format!("clipped beta #{i}{j}"), sched.beta, (m as f64 - 1.0) / denom);
            check(format!("clipped tau #{i}{j}"), sched.clipping.unwrap().tau, 4.0 * q * r / denom);
            points += 1;
        }
    }
    let pass = fails.is_empty() && points == 20;
    let detail = if pass {
        format!("analytic cases and {points}-point clipped grid within {C3_FORMULA:e}")
    } else {
        fails.join("; ")
    };
    report(3, "schedule formulas", pass, &detail);
}

#[test]
fn criterion_04_finite_rank_rate() {
    let start = Instant::now();
    let config = RateStudyConfig {
        n_grid: vec![100, 200, 400, 800, 1600, 3200, 6400],
        reps: 50,
        master_seed: SEED,
        ..RateStudyConfig::finite_rank_default()
    };
    let res = run_rate_study(&config).unwrap();
    let elapsed = start.elapsed();
    let pass = res.excluded.is_empty()
        && res.slope >= C4_SLOPE.0
        && res.slope <= C4_SLOPE.1
        && elapsed < C4_RUNTIME;
    report(
        4,
        "finite-rank rate study",
        pass,
        &format!(
            "slope {:.3} in [{}, {}] (theory {:.3}, r^2 {:.3}), lambda {:.2e}..{:.2e}, {:.1}s",
            res.slope,
            C4_SLOPE.0,
            C4_SLOPE.1,
            res.theoretical_slope,
            res.r_squared,
            res.rows[0].lambda,
            res.rows.last().unwrap().lambda,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_05_gaussian_kernel_study() {
    let start = Instant::now();
    let r25 = run_gaussian_sim(25, 100, SEED).unwrap();
    let r1 = run_gaussian_sim(1, 100, SEED).unwrap();
    let elapsed = start.elapsed();
    let iw25 = r25.min_mean("iw", 25).unwrap();
    let un25 = r25.min_mean("uniform", 25).unwrap();
    let paired = paired_comparison(&r25.per_rep_min("iw", 25), &r25.per_rep_min("uniform", 25));
    let iw1 = r1.min_mean("iw", 1).unwrap();
    let un1 = r1.min_mean("uniform", 1).unwrap();
    let failed = r25.records.iter().chain(&r1.records).filter(|r| r.mse.is_none()).count();
    let pass = iw25.mean_mse < un25.mean_mse
        && paired.fraction >= C5_WIN_FRACTION
        && un1.mean_mse <= C5_K1_RATIO * iw1.mean_mse
        && elapsed < C5_RUNTIME;
    report(
        5,
        "gaussian-kernel reproduction",
        pass,
        &format!(
            "k=25 min MSE iw {:.4e} < uniform {:.4e}, iw wins {}/{} reps ({:.2} >= {C5_WIN_FRACTION}); k=1 uniform {:.4e} <= {C5_K1_RATIO} x iw {:.4e}; {failed} failed cells, {:.1}s",
            iw25.mean_mse,
            un25.mean_mse,
            paired.wins,
            paired.pairs,
            paired.fraction,
            un1.mean_mse,
            iw1.mean_mse,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_06_polynomial_study() {
    let start = Instant::now();
    let res = run_polynomial_sim(&[1, 2, 3, 4, 5, 6, 7], 1.0, 100, SEED).unwrap();
    let elapsed = start.elapsed();
    let iw = res.mean_at("iw", 1, 1.0).unwrap();
    let un = res.mean_at("uniform", 1, 1.0).unwrap();
    let paired = paired_comparison(&res.per_rep_at("iw", 1, 1.0), &res.per_rep_at("uniform", 1, 1.0));
    let pass = iw.mean_mse < un.mean_mse && paired.sign_test_p < C6_SIGN_P && elapsed < C6_RUNTIME;
    report(
        6,
        "polynomial reproduction",
        pass,
        &format!(
            "degree 1: mean MSE iw {:.4e} < uniform {:.4e}, iw better in {}/{} reps, sign test p {:.2e} < {C6_SIGN_P}; {:.1}s",
            iw.mean_mse,
            un.mean_mse,
            paired.wins,
            paired.pairs,
            paired.sign_test_p,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_projection_bias() {
    let config = ProjectionStudyConfig {
        n: 6400,
        master_seed: SEED,
        ..ProjectionStudyConfig::misspecified_default()
    };
    let res = run_projection_study(&config).unwrap();
    // the affine projections of x^2 are 1/3 under U(-1,1) and x - 1/6 under
    // U(0,1); they differ by x - 1/2, whose L2(U(0,1)) norm is sqrt(1/12)
    let exact_bias = (1.0f64 / 12.0).sqrt();
    let bias_ok = res.bias.estimate > C7_BIAS_SE_MULT * res.bias.stderr;
    let bias_value_ok = (res.bias.estimate - exact_bias).abs() <= 3.0 * res.bias.stderr + 1e-3;
    let closer_ok = res.iw_closer_fraction >= C7_CLOSER_FRACTION;

    let fm = config.kernel.feature_map(1).unwrap();
    let affine = TargetFunction::Polynomial { coefs: vec![0.4, -1.3] };
    let f = move |x: &[f64]| affine.eval(x);
    let te = DensityModel::uniform(0.0, 1.0).unwrap();
    let primes = [
        DensityModel::uniform(-1.0, 1.0).unwrap(),
        DensityModel::gaussian(0.0, 0.5).unwrap(),
        DensityModel::uniform(-0.5, 2.0).unwrap(),
        te.clone(),
    ];
    let mut well = Vec::new();
    for (i, p) in primes.iter().enumerate() {
        let b = bias_term(&fm, &f, p, &te, 100_000, derive_seed(SEED, &[7, i as u64])).unwrap();
        well.push((b.estimate, b.stderr));
    }
    let well_ok = well.iter().all(|(e, se)| *e <= C7_ZERO_SE_MULT * se);
    let worst_well = well.iter().map(|(e, se)| e / se).fold(0.0, f64::max);
    report(
        7,
        "projection and bias",
        bias_ok && bias_value_ok && closer_ok && well_ok,
        &format!(
            "misspecified bias {:.4} (exact {:.4}) = {:.0} SE (> {C7_BIAS_SE_MULT}); iw closer to f_H in {:.0}% of {} reps (>= {:.0}%); well-specified worst bias/SE {:.2} (<= {C7_ZERO_SE_MULT}) over {} measures",
            res.bias.estimate,
            exact_bias,
            res.bias.estimate / res.bias.stderr,
            100.0 * res.iw_closer_fraction,
            config.reps,
            100.0 * C7_CLOSER_FRACTION,
            worst_well,
            primes.len()
        ),
    );
}

#[test]
fn criterion_08_spectral_properties() {
    let mut rng = rng_from_seed(SEED);
    let train = DensityModel::gaussian(0.0, 0.5).unwrap();
    let test = DensityModel::gaussian(1.5, 0.3).unwrap();
    let bound = quantile_radius(&[train.clone(), test.clone()], 0.999).unwrap();
    // every sample point inside the normalization radius
    let xs: Vec<Point> = train
        .sample(400, &mut rng)
        .into_iter()
        .map(|x| vec![x[0].clamp(-bound, bound)])
        .collect();
    let kernels = [
        KernelSpec::gaussian(1.0).unwrap(),
        KernelSpec::matern(1.5, 0.5).unwrap(),
        KernelSpec::polynomial(3, 1.0).unwrap().normalize(bound).unwrap(),
        KernelSpec::linear().normalize(bound).unwrap(),
    ];
    let mut max_trace: f64 = 0.0;
    let mut monotone = true;
    let lambdas = log_grid(1e-8, 1e2, 60);
    for k in &kernels {
        let eig = empirical_eigs(k, &xs).unwrap();
        max_trace = max_trace.max(eig.iter().sum());
        let nd: Vec<f64> = lambdas.iter().map(|&l| effective_dimension(&eig, l)).collect();
        monotone &= nd.windows(2).all(|w| w[1] <= w[0]);
    }

    let mut worst_decay: f64 = 0.0;
    for &s in &[0.2, 0.35, 0.5, 0.75, 0.9] {
        let eig: Vec<f64> = (1..=300).map(|i| (i as f64).powf(-1.0 / s)).collect();
        let fit = estimate_decay(&eig, 2, 1e-10 * eig[0]).unwrap();
        worst_decay = worst_decay.max((fit.s_hat - s).abs());
    }

    let mut rank_ok = true;
    let mut ranks = Vec::new();
    for degree in 1..=6u32 {
        let k = KernelSpec::polynomial(degree, 1.0).unwrap().normalize(bound).unwrap();
        let eig = empirical_eigs(&k, &xs).unwrap();
        let rank = eig.iter().filter(|&&m| m > 1e-10 * eig[0]).count();
        rank_ok &= rank <= degree as usize + 1;
        ranks.push(rank);
    }
    report(
        8,
        "spectral properties",
        max_trace <= C8_TRACE && monotone && worst_decay <= C8_DECAY && rank_ok,
        &format!(
            "max trace {max_trace:.6} (<= 1+1e-8), N(lambda) monotone {monotone}, worst |s_hat - s| {worst_decay:.2e} (<= {C8_DECAY}), polynomial ranks {ranks:?} for degrees 1..6"
        ),
    );
}

/// `E_te[w^k]` for Gaussian test/train densities, by completing the square.
fn gaussian_weight_moment(k: f64, (mt, vt): (f64, f64), (mr, vr): (f64, f64)) -> f64 {
    let a = (k + 1.0) / vt - k / vr;
    let b = (k + 1.0) * mt / vt - k * mr / vr;
    let c = (k + 1.0) * mt * mt / vt - k * mr * mr / vr;
    let log_norm = -0.5 * (k + 1.0) * (2.0 * std::f64::consts::PI * vt).ln() + 0.5 * k * (2.0 * std::f64::consts::PI * vr).ln();
    (log_norm + 0.5 * (2.0 * std::f64::consts::PI / a).ln() + b * b / (2.0 * a) - c / 2.0).exp()
}

#[test]
fn criterion_09_clipped_operator_lemmas() {
    let te = (1.5, 0.3);
    let tr = (0.0, 0.5);
    let test = DensityModel::gaussian(te.0, te.1).unwrap();
    let train = DensityModel::gaussian(tr.0, tr.1).unwrap();
    // moment condition with q = 1: E_te[w^{m-1}] <= m! W^{m-2} sigma^2 / 2
    let sigma2 = gaussian_weight_moment(1.0, te, tr);
    let mut factorial = 2.0;
    let mut w_const: f64 = 0.0;
    for m in 3..=60u32 {
        factorial *= m as f64;
        let need = (2.0 * gaussian_weight_moment((m - 1) as f64, te, tr) / (factorial * sigma2)).powf(1.0 / (m as f64 - 2.0));
        w_const = w_const.max(need);
    }
    let bound = quantile_radius(&[train.clone(), test.clone()], 0.999).unwrap();
    let kernel = KernelSpec::polynomial(2, 1.0).unwrap().normalize(bound).unwrap();
    let fm = kernel.feature_map(1).unwrap();
    let params = RateParams {
        q: 1.0,
        w: w_const,
        sigma: sigma2.sqrt(),
        ..RateParams::finite_rank(0.5, 1.0, fm.len())
    };
    let samples = ClippedOperatorSamples::new(&fm, &test, &train, 100_000, SEED).unwrap();
    let mut worst1: f64 = 0.0;
    let mut worst2: f64 = 0.0;
    let mut trace_gap = f64::NEG_INFINITY;
    let mut all_ok = true;
    let mut points = 0;
    for &lambda in &[1e-3, 1e-2, 1e-1, 0.5, 1.0] {
        for &m in &[3u32, 10] {
            let d = lemma_threshold(&params, m, lambda);
            let c = samples.check(d, lambda, 100).unwrap();
            let ok1 = c.norm1 <= 0.5 * 1.1 + C9_SE_MULT * c.norm1_se;
            let ok2 = c.norm2 <= 2.0 * 1.1 + C9_SE_MULT * c.norm2_se;
            let ok3 = c.tr_td <= c.tr_t + C9_TRACE;
            all_ok &= ok1 && ok2 && ok3;
            worst1 = worst1.max(c.norm1 - C9_SE_MULT * c.norm1_se);
            worst2 = worst2.max(c.norm2 - C9_SE_MULT * c.norm2_se);
            trace_gap = trace_gap.max(c.tr_td - c.tr_t);
            points += 1;
        }
    }
    report(
        9,
        "clipped operator checks",
        all_ok && points == 10,
        &format!(
            "10 (lambda, D) points, W {w_const:.3}, sigma^2 {sigma2:.3}; max norm1 - 3SE {worst1:.3} (<= 0.55), max norm2 - 3SE {worst2:.3} (<= 2.2), max Tr(T_D) - Tr(T) {trace_gap:.2e} (<= 1e-6)"
        ),
    );
}

#[test]
fn criterion_10_classification() {
    let res = run_classify_sim(&ClassifySimConfig {
        runs: 20,
        master_seed: SEED,
        ..ClassifySimConfig::default()
    })
    .unwrap();
    let runs_ok = res.runs.len() == 20
        && res
            .runs
            .iter()
            .all(|r| r.excess_risk <= r.bound + C10_SE_MULT * r.excess_stderr);
    let worst = res
        .runs
        .iter()
        .map(|r| r.excess_risk - r.bound - C10_SE_MULT * r.excess_stderr)
        .fold(f64::NEG_INFINITY, f64::max);

    let mut rng = rng_from_seed(derive_seed(SEED, &[10]));
    let mut scale_ok = true;
    for _ in 0..200 {
        let v: Vec<f64> = (0..50).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
        let c: f64 = rand::Rng::gen_range(&mut rng, 1e-6..1e6);
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        scale_ok &= sign_of_values(&v) == sign_of_values(&scaled);
    }
    report(
        10,
        "classification excess risk",
        runs_ok && scale_ok && !res.margin.degenerate,
        &format!(
            "20 runs, max excess - bound - 3SE {worst:.3e} (<= 0), alpha {:.3}, c_alpha {:.3}; sign scale invariance {scale_ok}",
            res.margin.alpha.unwrap_or(f64::NAN),
            res.margin.c_alpha.unwrap_or(f64::NAN)
        ),
    );
}

fn iwkrr(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_iwkrr"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn without_timestamp(text: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v.as_object_mut().unwrap().remove("timestamp");
    v
}

/// Compares every file of two output directories byte for byte.
fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let manifest_a = std::fs::read_to_string(a.join("manifest.json")).map_err(|e| e.to_string())?;
    let manifest_b = std::fs::read_to_string(b.join("manifest.json")).map_err(|e| e.to_string())?;
    if without_timestamp(&manifest_a) != without_timestamp(&manifest_b) {
        return Err(format!("manifests differ: {}", a.display()));
    }
    let outputs = without_timestamp(&manifest_a)["outputs"].as_array().unwrap().clone();
    for f in &outputs {
        let name = f.as_str().unwrap();
        let x = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{name} differs"));
        }
    }
    Ok(outputs.len())
}

#[test]
fn criterion_11_rerun_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data.csv");
    let mut csv = String::from("x1,y\n");
    let mut rng = rng_from_seed(SEED);
    for _ in 0..40 {
        let x: f64 = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        csv.push_str(&format!("{x},{}\n", x.sin()));
    }
    std::fs::write(&data, csv).unwrap();
    let data = data.to_str().unwrap().to_string();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("fit", vec!["fit", "--data", &data, "--kernel", "gaussian:1", "--lambda", "0.01", "--weights", "iw", "--train-dist", "normal:0,0.5", "--test-dist", "normal:1.5,0.3"]),
        ("sim-gaussian", vec!["sim", "gaussian", "--k", "25", "--reps", "3", "--seed", "7", "--plotdata"]),
        ("sim-poly", vec!["sim", "poly", "--reps", "3", "--seed", "7", "--plotdata"]),
        ("rates", vec!["rates", "--reps", "4", "--seed", "7"]),
        ("rates-clipped", vec!["rates", "--strategy", "clipped", "--reps", "3", "--seed", "7"]),
        ("spectrum", vec!["spectrum", "--kernel", "matern:1.5,1", "--n", "200", "--seed", "7"]),
        ("schedule", vec!["schedule", "--r", "0.5", "--s", "0", "--q", "0", "--n", "1000"]),
        ("diagnose", vec!["diagnose-weights", "--mc", "20000", "--seed", "7"]),
        ("classify", vec!["classify-sim", "--runs", "3", "--seed", "7"]),
        ("check", vec!["check", "--suite", "oracle", "--seed", "7"]),
    ];
    let mut failures = Vec::new();
    let mut files = 0;
    for (name, args) in &runs {
        let first = root.join(format!("{name}-a"));
        let again = root.join(format!("{name}-b"));
        let mut a: Vec<&str> = args.clone();
        let first_s = first.to_str().unwrap().to_string();
        a.extend(["--out", &first_s]);
        let code = iwkrr(&a);
        if code != 0 {
            failures.push(format!("{name} exited {code}"));
            continue;
        }
        let manifest = first.join("manifest.json");
        let code = iwkrr(&["rerun", manifest.to_str().unwrap(), "--out", again.to_str().unwrap()]);
        if code != 0 {
            failures.push(format!("{name} rerun exited {code}"));
            continue;
        }
        match same_outputs(&first, &again) {
            Ok(k) => files += k,
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    report(
        11,
        "rerun determinism",
        failures.is_empty(),
        &if failures.is_empty() {
            format!("{} subcommand runs, {files} output files byte-identical on rerun", runs.len())
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn strategy_objects_cover_iw_and_uniform() {
    // guards the strategy names the criteria above look up
    let iw = WeightStrategy::true_iw(DensityModel::gaussian(1.5, 0.3).unwrap(), DensityModel::gaussian(0.0, 0.5).unwrap());
    assert_eq!(iw.name(), "iw");
    assert_eq!(WeightStrategy::Uniform.name(), "uniform");
}
