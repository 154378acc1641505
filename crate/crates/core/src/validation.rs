//! Independent oracles for the numerical core: dense quadrature, explicit
//! retraining, finite differences and timing probes.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::criteria::CriterionKind;
use crate::ep::{cavity_from_posterior, ep_fit, posterior_from_sites, predict, EpOptions, SiteParams};
use crate::error::{Error, Result};
use crate::kernel::{cross_kernel, kernel_grads, kernel_matrix, Hyperparams, KernelMode};
use crate::loo::{cavity_derivatives, loo_predictive};
use crate::ls_cv::ls_loo;
use crate::model_selection::{frozen_criterion, ls_criterion, SelectionOptions};
use crate::normal;
use crate::parallel::Parallelism;

const FD_STEP: f64 = 1e-5;

/// A random binary problem in two dimensions with labels loosely tied to
/// the first coordinate.
#[derive(Debug, Clone)]
pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub hyper: Hyperparams,
}

impl Instance {
    pub fn random(seed: u64, n: usize, with_ridge: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.5..1.5));
        let mut y: Vec<f64> = (0..n)
            .map(|i| {
                let score = x[(i, 0)] - 0.5 * x[(i, 1)] + 0.5 * rng.random_range(-1.0..1.0);
                if score > 0.0 { 1.0 } else { -1.0 }
            })
            .collect();
        if n >= 2 && y.iter().all(|&v| v == y[0]) {
            y[0] = -y[0];
        }
        let mut hyper = Hyperparams::initial(2, KernelMode::Ard, with_ridge);
        hyper.log_signal_variance = rng.random_range(-0.3..0.8);
        hyper.log_lengthscales = vec![rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
        hyper.bias = rng.random_range(-0.3..0.3);
        if with_ridge {
            hyper.log_ridge = Some(rng.random_range(-4.0..-1.5));
        }
        Instance { x, y, hyper }
    }

    fn sites(&self) -> Result<SiteParams> {
        let k = kernel_matrix(&self.x, &self.hyper)?;
        Ok(ep_fit(&k, &self.y, self.hyper.bias, &EpOptions::default())?.sites)
    }
}

/// Exact posterior summaries of a two-point probit model.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub log_evidence: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    /// Predictive probability of the positive class at each test column.
    pub prob_pos: Vec<f64>,
}

/// Trapezoid integration of the two-point posterior on a whitened grid.
/// `k_star` holds train-by-test cross covariances, `k_star_diag` the test
/// prior variances.
pub fn quadrature_posterior(
    k: &DMatrix<f64>,
    y: [f64; 2],
    bias: f64,
    k_star: &DMatrix<f64>,
    k_star_diag: &[f64],
    nodes: usize,
) -> Result<ExactPosterior> {
    if k.shape() != (2, 2) || k_star.nrows() != 2 || k_star.ncols() != k_star_diag.len() || nodes < 3 {
        return Err(Error::Input("quadrature needs a 2x2 kernel and matching test blocks".into()));
    }
    let chol = k.clone().cholesky().ok_or(Error::Numerical("kernel is not positive definite".into()))?;
    let l = chol.l();
    let weights_star = chol.solve(k_star);
    let pred_var: Vec<f64> =
        (0..k_star_diag.len()).map(|t| (k_star_diag[t] - k_star.column(t).dot(&weights_star.column(t))).max(0.0)).collect();

    let half = 9.0;
    let h = 2.0 * half / (nodes - 1) as f64;
    let coord = |i: usize| -half + h * i as f64;
    let trap = |i: usize| if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };

    let mut z = 0.0;
    let mut m = [0.0; 2];
    let mut s = [[0.0; 2]; 2];
    let mut p = vec![0.0; k_star_diag.len()];
    for a in 0..nodes {
        let za = coord(a);
        let wa = trap(a) * normal::pdf(za);
        for b in 0..nodes {
            let zb = coord(b);
            let f = [l[(0, 0)] * za, l[(1, 0)] * za + l[(1, 1)] * zb];
            let w = wa * trap(b) * normal::pdf(zb) * normal::cdf(y[0] * (f[0] + bias)) * normal::cdf(y[1] * (f[1] + bias));
            if w == 0.0 {
                continue;
            }
            z += w;
            for r in 0..2 {
                m[r] += w * f[r];
                for c in 0..2 {
                    s[r][c] += w * f[r] * f[c];
                }
            }
            for (t, pt) in p.iter_mut().enumerate() {
                let mu = weights_star[(0, t)] * f[0] + weights_star[(1, t)] * f[1];
                *pt += w * normal::cdf((mu + bias) / (1.0 + pred_var[t]).sqrt());
            }
        }
    }
    let mean = [m[0] / z, m[1] / z];
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            cov[r][c] = s[r][c] / z - mean[r] * mean[c];
        }
    }
    Ok(ExactPosterior {
        log_evidence: (z * h * h).ln(),
        mean,
        cov,
        prob_pos: p.into_iter().map(|v| v / z).collect(),
    })
}

/// Largest deviations of EP from quadrature on a two-point problem.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureGap {
    /// Over marginal means and variances.
    pub moments: f64,
    pub log_evidence: f64,
    pub prediction: f64,
}

/// EP against quadrature for two training points at distance `distance`
/// (unit lengthscales), signal variance `signal`, labels `y` and bias.
pub fn ep_quadrature_gap(distance: f64, signal: f64, y: [f64; 2], bias: f64) -> Result<QuadratureGap> {
    let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, distance, 0.0]);
    let x_test = DMatrix::from_row_slice(3, 2, &[0.5 * distance, 0.5, -1.0, 0.3, distance + 1.0, -0.7]);
    let mut h = Hyperparams::initial(2, KernelMode::Ard, false);
    h.log_signal_variance = signal.ln();
    h.log_lengthscales = vec![0.0; 2];
    h.bias = bias;
    let k = kernel_matrix(&x, &h)?;
    let ks = cross_kernel(&x, &x_test, &h)?;
    let exact = quadrature_posterior(k.matrix(), y, bias, &ks, &[signal; 3], 601)?;
    let state = ep_fit(&k, &y, bias, &EpOptions::default())?;
    let mut moments: f64 = 0.0;
    for r in 0..2 {
        moments = moments
            .max((state.posterior.mean[r] - exact.mean[r]).abs())
            .max((state.posterior.cov[(r, r)] - exact.cov[r][r]).abs());
    }
    let pred = predict(&x, &state, &h, &x_test)?;
    let prediction = pred.iter().zip(&exact.prob_pos).map(|(a, b)| (a.prob_pos - b).abs()).fold(0.0, f64::max);
    Ok(QuadratureGap { moments, log_evidence: (state.log_ml - exact.log_evidence).abs(), prediction })
}

/// Two-point problems with prior correlation at most 0.3: both label
/// patterns, two signal variances and two biases at each distance.
pub fn quadrature_panel() -> Result<Vec<QuadratureGap>> {
    let mut out = Vec::new();
    for distance in [4.0, (-2.0 * 0.3f64.ln()).sqrt()] {
        for signal in [1.0, 2.0] {
            for y in [[1.0, 1.0], [1.0, -1.0]] {
                for bias in [0.0, 0.3] {
                    out.push(ep_quadrature_gap(distance, signal, y, bias)?);
                }
            }
        }
    }
    Ok(out)
}

/// Largest relative deviation of the closed-form LS LOO moments from
/// explicit retraining on n − 1 points.
pub fn ls_retrain_gap(seed: u64, n: usize) -> Result<f64> {
    let inst = Instance::random(seed, n, true);
    let ridge = inst.hyper.ridge().unwrap_or_default();
    let k = kernel_matrix(&inst.x, &inst.hyper)?;
    let state = ls_loo(&k, &inst.y, ridge)?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let sub = DMatrix::from_fn(n - 1, n - 1, |a, b| {
            k.matrix()[(keep[a], keep[b])] + if a == b { ridge } else { 0.0 }
        });
        let chol = sub.cholesky().ok_or(Error::Numerical("retraining system is singular".into()))?;
        let kv = DVector::from_iterator(n - 1, keep.iter().map(|&j| k.matrix()[(i, j)]));
        let ys = DVector::from_iterator(n - 1, keep.iter().map(|&j| inst.y[j]));
        let mean = kv.dot(&chol.solve(&ys));
        let var = k.matrix()[(i, i)] + ridge - kv.dot(&chol.solve(&kv));
        worst = worst
            .max((state.loo_mean[i] - mean).abs() / mean.abs().max(1e-12))
            .max((state.loo_var[i] - var).abs() / var.abs().max(1e-12));
    }
    Ok(worst)
}

fn rel_gap(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

fn central_difference<F>(theta: &[f64], mut value: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    (0..theta.len())
        .map(|j| {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[j] += FD_STEP;
            minus[j] -= FD_STEP;
            Ok((value(&plus)? - value(&minus)?) / (2.0 * FD_STEP))
        })
        .collect()
}

/// Relative error of a LOO criterion gradient (sites held fixed) against
/// central differences.
pub fn criterion_gradient_gap(seed: u64, n: usize, kind: CriterionKind) -> Result<f64> {
    let inst = Instance::random(seed, n, false);
    let sites = inst.sites()?;
    let opts = SelectionOptions::default();
    let at = frozen_criterion(&inst.x, &inst.y, &inst.hyper, &sites, kind, &opts)?;
    let theta = inst.hyper.to_vec();
    let fd = central_difference(&theta, |t| {
        Ok(frozen_criterion(&inst.x, &inst.y, &inst.hyper.with_values(t)?, &sites, kind, &opts)?.value)
    })?;
    Ok(rel_gap(&at.gradient, &fd))
}

/// Same check for the least-squares LOO NLP, ridge included.
pub fn ls_gradient_gap(seed: u64, n: usize) -> Result<f64> {
    let inst = Instance::random(seed, n, true);
    let opts = SelectionOptions::default();
    let at = ls_criterion(&inst.x, &inst.y, &inst.hyper, &opts)?;
    let theta = inst.hyper.to_vec();
    let fd = central_difference(&theta, |t| Ok(ls_criterion(&inst.x, &inst.y, &inst.hyper.with_values(t)?, &opts)?.value))?;
    Ok(rel_gap(&at.gradient, &fd))
}

/// Relative error of the cavity mean and variance derivatives.
pub fn cavity_derivative_gap(seed: u64, n: usize) -> Result<f64> {
    let inst = Instance::random(seed, n, false);
    let sites = inst.sites()?;
    let h = &inst.hyper;
    let k = kernel_matrix(&inst.x, h)?;
    let post = posterior_from_sites(&k, &sites)?;
    let dk = kernel_grads(&inst.x, h, &k);
    let d = cavity_derivatives(&k, &dk, &sites, &post, Parallelism::Sequential)?;
    let cavity_at = |t: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let hh = h.with_values(t)?;
        let kk = kernel_matrix(&inst.x, &hh)?;
        let c = cavity_from_posterior(&posterior_from_sites(&kk, &sites)?, &sites)?;
        Ok((c.mean, c.variance))
    };
    let mut worst: f64 = 0.0;
    for j in 0..dk.len() {
        let mut plus = h.to_vec();
        let mut minus = h.to_vec();
        plus[j] += FD_STEP;
        minus[j] -= FD_STEP;
        let (mp, vp) = cavity_at(&plus)?;
        let (mm, vm) = cavity_at(&minus)?;
        let fd_mean: Vec<f64> = (0..n).map(|i| (mp[i] - mm[i]) / (2.0 * FD_STEP)).collect();
        let fd_var: Vec<f64> = (0..n).map(|i| (vp[i] - vm[i]) / (2.0 * FD_STEP)).collect();
        let an_mean: Vec<f64> = d.mean.column(j).iter().copied().collect();
        let an_var: Vec<f64> = d.variance.column(j).iter().copied().collect();
        worst = worst.max(rel_gap(&an_mean, &fd_mean)).max(rel_gap(&an_var, &fd_var));
    }
    Ok(worst)
}

/// |cavity predictive − prediction after refitting EP without the point|
/// for every training point.
pub fn loo_fidelity(seed: u64, n: usize) -> Result<Vec<f64>> {
    let inst = Instance::random(seed, n, false);
    let h = &inst.hyper;
    let k = kernel_matrix(&inst.x, h)?;
    let state = ep_fit(&k, &inst.y, h.bias, &EpOptions::default())?;
    let loo = loo_predictive(&state.cavity, &inst.y, h.bias)?;
    (0..n)
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let xs = inst.x.select_rows(&keep);
            let ys: Vec<f64> = keep.iter().map(|&j| inst.y[j]).collect();
            let st = ep_fit(&kernel_matrix(&xs, h)?, &ys, h.bias, &EpOptions::default())?;
            let p = predict(&xs, &st, h, &inst.x.select_rows(&[i]))?[0].prob_pos;
            Ok((loo.prob_pos[i] - p).abs())
        })
        .collect()
}

/// Median wall time of one M-step gradient evaluation (smoothed F,
/// sites fixed) on a random problem of size `n` in `dim` dimensions.
pub fn gradient_timing(n: usize, dim: usize, reps: usize, seed: u64, parallelism: Parallelism) -> Result<Duration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..n).map(|i| if x[(i, 0)] + 0.3 * rng.random_range(-1.0..1.0) > 0.0 { 1.0 } else { -1.0 }).collect();
    let h = Hyperparams::initial(dim, KernelMode::Ard, false);
    let k = kernel_matrix(&x, &h)?;
    let sites = ep_fit(&k, &y, h.bias, &EpOptions::default())?.sites;
    let opts = SelectionOptions { parallelism, ..SelectionOptions::default() };
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        frozen_criterion(&x, &y, &h, &sites, CriterionKind::SmoothedF, &opts)?;
        times.push(start.elapsed());
    }
    times.sort();
    Ok(times[times.len() / 2])
}

/// Least-squares slope of log(time) against log(n).
pub fn power_law_exponent(sizes: &[usize], times: &[Duration]) -> Result<f64> {
    if sizes.len() != times.len() || sizes.len() < 2 {
        return Err(Error::Input("need at least two (size, time) pairs".into()));
    }
    let lx: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = times.iter().map(|t| t.as_secs_f64().max(1e-12).ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// One named pass/fail line of the oracle suite.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check { name: name.into(), value, tolerance, passed: value.is_finite() && value <= tolerance }
    }

    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check { name: name.into(), value, tolerance, passed: value.is_finite() && value >= tolerance }
    }
}

fn worst_over<F>(seeds: u64, f: F) -> Result<f64>
where
    F: Fn(u64) -> Result<f64>,
{
    (0..seeds).try_fold(0.0f64, |acc, s| Ok(acc.max(f(s)?)))
}

/// Quadrature, retraining and finite-difference oracles.
pub fn oracle_suite(seeds: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let gaps = quadrature_panel()?;
    let worst = |f: fn(&QuadratureGap) -> f64| gaps.iter().map(f).fold(0.0, f64::max);
    checks.push(Check::at_most("ep moments vs quadrature", worst(|g| g.moments), 1e-3));
    checks.push(Check::at_most("ep log evidence vs quadrature", worst(|g| g.log_evidence), 1e-2));
    checks.push(Check::at_most("ep prediction vs quadrature", worst(|g| g.prediction), 1e-2));
    checks.push(Check::at_most(
        "ls loo vs retraining",
        worst_over(seeds, |s| ls_retrain_gap(s, 3 + (s as usize % 8)))?,
        1e-8,
    ));
    let size = |s: u64| 3 + (s as usize % 6);
    for kind in [CriterionKind::Nlp, CriterionKind::SmoothedF, CriterionKind::SmoothedWer, CriterionKind::SmoothedAuc] {
        checks.push(Check::at_most(
            format!("{} gradient vs finite differences", kind.name()),
            worst_over(seeds, |s| criterion_gradient_gap(1000 + s, size(s), kind))?,
            1e-4,
        ));
    }
    checks.push(Check::at_most(
        "ls nlp gradient vs finite differences",
        worst_over(seeds, |s| ls_gradient_gap(2000 + s, size(s)))?,
        1e-4,
    ));
    checks.push(Check::at_most(
        "cavity derivatives vs finite differences",
        worst_over(seeds, |s| cavity_derivative_gap(3000 + s, size(s)))?,
        1e-4,
    ));
    Ok(checks)
}

/// Share of training points whose cavity prediction is within 0.05 of an
/// EP refit without them, pooled over `seeds` problems of size `n`.
pub fn fidelity_check(seeds: u64, n: usize) -> Result<Check> {
    let mut close = 0usize;
    let mut total = 0usize;
    for seed in 0..seeds {
        let gaps = loo_fidelity(seed, n)?;
        close += gaps.iter().filter(|g| **g <= 0.05).count();
        total += gaps.len();
    }
    Ok(Check::at_least("cavity vs refit within 0.05 (share)", close as f64 / total.max(1) as f64, 0.95))
}

/// Fitted exponent of the M-step gradient time over `sizes`; passes
/// within 0.5 of 3.
pub fn complexity_check(sizes: &[usize], dim: usize, reps: usize) -> Result<Check> {
    let times: Vec<Duration> =
        sizes.iter().map(|&n| gradient_timing(n, dim, reps, 7, Parallelism::Sequential)).collect::<Result<_>>()?;
    let exponent = power_law_exponent(sizes, &times)?;
    Ok(Check {
        name: "gradient time exponent".into(),
        value: exponent,
        tolerance: 0.5,
        passed: (exponent - 3.0).abs() <= 0.5,
    })
}
