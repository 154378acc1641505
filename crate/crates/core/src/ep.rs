//! Expectation Propagation for the GP classifier with probit likelihood
//! p(yᵢ | fᵢ) = Φ(yᵢ (fᵢ + γ)).
//!
//! Sites are stored in natural form (precision τ̃ = 1/σ², shift ν̃ = μ/σ²) so
//! that a flat site (σ² = +∞) is simply τ̃ = 0. All solves go through
//! B = I + S^½ K S^½ with S = diag(τ̃), which never forms K⁻¹ or Σ.

use crate::error::{Error, Result};
use crate::kernel::{cross_kernel, kernel_matrix, Hyperparams, KernelMatrix};
use crate::normal;
use nalgebra::{DMatrix, DVector};

/// Per-example Gaussian site factors Zᵢ N(fᵢ | μᵢ, σᵢ²).
#[derive(Debug, Clone, PartialEq)]
pub struct SiteParams {
    precision: Vec<f64>,
    shift: Vec<f64>,
    lognorm: Vec<f64>,
}

impl SiteParams {
    /// n flat sites (σᵢ² = +∞): the posterior equals the prior.
    pub fn flat(n: usize) -> Self {
        SiteParams {
            precision: vec![0.0; n],
            shift: vec![0.0; n],
            lognorm: vec![0.0; n],
        }
    }

    /// Build from site means and variances; `f64::INFINITY` marks a flat site.
    pub fn from_moments(means: &[f64], variances: &[f64], lognorms: &[f64]) -> Result<Self> {
        let n = means.len();
        if variances.len() != n || lognorms.len() != n {
            return Err(Error::Input("site vectors differ in length".into()));
        }
        let mut precision = Vec::with_capacity(n);
        let mut shift = Vec::with_capacity(n);
        for (i, (&mu, &var)) in means.iter().zip(variances).enumerate() {
            if !(var > 0.0) {
                return Err(Error::State(format!("site {i} has non-positive variance {var}")));
            }
            if var.is_infinite() {
                precision.push(0.0);
                shift.push(0.0);
            } else {
                precision.push(1.0 / var);
                shift.push(mu / var);
            }
        }
        Ok(SiteParams { precision, shift, lognorm: lognorms.to_vec() })
    }

    /// Build directly from natural parameters (τ̃ ≥ 0).
    pub fn from_natural(precision: Vec<f64>, shift: Vec<f64>, lognorm: Vec<f64>) -> Result<Self> {
        if precision.len() != shift.len() || precision.len() != lognorm.len() {
            return Err(Error::Input("site vectors differ in length".into()));
        }
        if let Some(i) = precision.iter().position(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(Error::State(format!("site {i} has invalid precision {}", precision[i])));
        }
        Ok(SiteParams { precision, shift, lognorm })
    }

    pub fn len(&self) -> usize {
        self.precision.len()
    }

    pub fn is_empty(&self) -> bool {
        self.precision.is_empty()
    }

    /// τ̃ᵢ = 1/σᵢ²
    pub fn precisions(&self) -> &[f64] {
        &self.precision
    }

    /// ν̃ᵢ = μᵢ/σᵢ²
    pub fn shifts(&self) -> &[f64] {
        &self.shift
    }

    pub fn site_mean(&self, i: usize) -> f64 {
        if self.precision[i] > 0.0 {
            self.shift[i] / self.precision[i]
        } else {
            0.0
        }
    }

    pub fn site_variance(&self, i: usize) -> f64 {
        1.0 / self.precision[i]
    }

    pub fn site_lognorm(&self, i: usize) -> f64 {
        self.lognorm[i]
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.site_mean(i)).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.site_variance(i)).collect()
    }

    pub fn lognorms(&self) -> &[f64] {
        &self.lognorm
    }
}

/// Gaussian approximation N(f | m, C) to the latent posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Cavity (leave-one-site-out) marginals N(fᵢ | μ₋ᵢ, σ²₋ᵢ).
#[derive(Debug, Clone, PartialEq)]
pub struct Cavity {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Cavity {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpState {
    pub sites: SiteParams,
    pub posterior: Posterior,
    pub cavity: Cavity,
    /// EP approximation of log p(y | X, θ).
    pub log_ml: f64,
    pub sweeps_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpOptions {
    pub max_sweeps: usize,
    /// Sup-norm threshold on the change of (τ̃, ν̃) over one sweep.
    pub tol: f64,
}

impl Default for EpOptions {
    fn default() -> Self {
        EpOptions { max_sweeps: 60, tol: 1e-6 }
    }
}

/// Result of matching moments for one site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteUpdate {
    pub precision: f64,
    pub shift: f64,
    pub lognorm: f64,
    /// Mean of q₋ᵢ(fᵢ) Φ(yᵢ(fᵢ+γ)) after normalization.
    pub marginal_mean: f64,
    pub marginal_variance: f64,
    /// log of the zeroth moment Ẑᵢ.
    pub log_evidence: f64,
}

impl SiteUpdate {
    pub fn site_mean(&self) -> f64 {
        self.shift / self.precision
    }

    pub fn site_variance(&self) -> f64 {
        1.0 / self.precision
    }
}

/// Factorization of B = I + S^½ K S^½ shared by the posterior, evidence,
/// prediction and derivative code.
pub(crate) struct SiteSystem {
    pub(crate) sqrt_prec: DVector<f64>,
    pub(crate) chol_l: DMatrix<f64>,
}

impl SiteSystem {
    pub(crate) fn new(k: &DMatrix<f64>, sites: &SiteParams) -> Result<Self> {
        let n = k.nrows();
        if sites.len() != n {
            return Err(Error::Input(format!("{} sites for {} examples", sites.len(), n)));
        }
        if let Some(i) = sites.precision.iter().position(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::State(format!("site {i} has non-positive variance")));
        }
        let sqrt_prec = DVector::from_iterator(n, sites.precision.iter().map(|t| t.sqrt()));
        let mut b = DMatrix::from_fn(n, n, |i, j| sqrt_prec[i] * k[(i, j)] * sqrt_prec[j]);
        for i in 0..n {
            b[(i, i)] += 1.0;
        }
        let chol = b
            .cholesky()
            .ok_or_else(|| Error::Numerical("Cholesky of I + S^½KS^½ failed".into()))?;
        Ok(SiteSystem { sqrt_prec, chol_l: chol.unpack() })
    }

    /// L⁻¹ (S^½ rhs)
    pub(crate) fn half_solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut scaled = rhs.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= self.sqrt_prec[i];
        }
        self.chol_l.solve_lower_triangular_mut(&mut scaled);
        scaled
    }

    /// S^½ B⁻¹ S^½ rhs = (K + Σ)⁻¹ rhs
    pub(crate) fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut v = self.half_solve(rhs);
        self.chol_l.tr_solve_lower_triangular_mut(&mut v);
        for (i, mut row) in v.row_iter_mut().enumerate() {
            row *= self.sqrt_prec[i];
        }
        v
    }

    /// ½ log|B|
    pub(crate) fn half_log_det(&self) -> f64 {
        self.chol_l.diagonal().iter().map(|d| d.ln()).sum()
    }

    /// Posterior mean and marginal variances without forming C.
    pub(crate) fn marginals(&self, k: &DMatrix<f64>, sites: &SiteParams) -> (DVector<f64>, DVector<f64>) {
        let v = self.half_solve(k);
        let shift = DVector::from_column_slice(&sites.shift);
        let mean = k * &shift - v.tr_mul(&(&v * &shift));
        let var = DVector::from_iterator(k.nrows(), (0..k.nrows()).map(|i| k[(i, i)] - v.column(i).norm_squared()));
        (mean, var)
    }

    pub(crate) fn posterior(&self, k: &DMatrix<f64>, sites: &SiteParams) -> Posterior {
        let v = self.half_solve(k);
        let cov = k - v.tr_mul(&v);
        let cov = (&cov + cov.transpose()) * 0.5;
        let shift = DVector::from_column_slice(&sites.shift);
        let mean = &cov * shift;
        Posterior { mean, cov }
    }
}

/// Posterior moments m = CΣ⁻¹μ, C = K − K(K+Σ)⁻¹K for fixed sites.
pub fn posterior_from_sites(k: &KernelMatrix, sites: &SiteParams) -> Result<Posterior> {
    let kj = k.jittered();
    let system = SiteSystem::new(&kj, sites)?;
    Ok(system.posterior(&kj, sites))
}

/// Remove each site from the posterior marginal by Gaussian division.
pub fn cavity_from_posterior(posterior: &Posterior, sites: &SiteParams) -> Result<Cavity> {
    if posterior.mean.len() != sites.len() || posterior.cov.nrows() != sites.len() {
        return Err(Error::Input("posterior and sites differ in size".into()));
    }
    cavity_from_marginals(&posterior.mean, &posterior.cov.diagonal(), sites)
}

pub(crate) fn cavity_from_marginals(mean: &DVector<f64>, var: &DVector<f64>, sites: &SiteParams) -> Result<Cavity> {
    let n = sites.len();
    let mut cav_mean = Vec::with_capacity(n);
    let mut variance = Vec::with_capacity(n);
    for i in 0..n {
        let cii = var[i];
        let tau = 1.0 / cii - sites.precision[i];
        if !(tau > 0.0) || !(cii > 0.0) {
            return Err(Error::NegativeCavity { index: i, variance: 1.0 / tau });
        }
        let v = 1.0 / tau;
        variance.push(v);
        cav_mean.push(v * (mean[i] / cii - sites.shift[i]));
    }
    Ok(Cavity { mean: cav_mean, variance })
}

/// Moment-match Φ(y(f+γ)) against the cavity N(f | cavity_mean, cavity_var).
///
/// Returns `Ok(None)` when the matched site would have a non-positive
/// variance; the caller keeps the previous site for this sweep.
pub fn site_update(cavity_mean: f64, cavity_var: f64, y: f64, bias: f64) -> Result<Option<SiteUpdate>> {
    if !(cavity_var > 0.0) || !cavity_var.is_finite() {
        return Err(Error::State(format!("cavity variance must be positive, got {cavity_var}")));
    }
    let denom = (1.0 + cavity_var).sqrt();
    let z = y * (cavity_mean + bias) / denom;
    let log_evidence = normal::log_cdf(z);
    let ratio = normal::pdf_over_cdf(z);
    // first and second derivatives of log Ẑ with respect to the cavity mean
    let dlz = y * ratio / denom;
    let curvature = ratio * (z + ratio) / (1.0 + cavity_var);
    let marginal_mean = cavity_mean + cavity_var * dlz;
    let marginal_variance = cavity_var - cavity_var * cavity_var * curvature;
    let slack = 1.0 - curvature * cavity_var;
    if !(slack > 0.0) || !(curvature > 0.0) {
        return Ok(None);
    }
    let precision = curvature / slack;
    let shift = (dlz + curvature * cavity_mean) / slack;
    if !precision.is_finite() || !shift.is_finite() {
        return Ok(None);
    }
    let site_var = 1.0 / precision;
    let site_mean = shift / precision;
    let total = cavity_var + site_var;
    let d = cavity_mean - site_mean;
    let lognorm = log_evidence + 0.5 * (2.0 * std::f64::consts::PI * total).ln() + d * d / (2.0 * total);
    Ok(Some(SiteUpdate {
        precision,
        shift,
        lognorm,
        marginal_mean,
        marginal_variance,
        log_evidence,
    }))
}

fn check_labels(y: &[f64], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::Input(format!("{} labels for {} examples", y.len(), n)));
    }
    if let Some(i) = y.iter().position(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Input(format!("label {i} is {} (expected ±1)", y[i])));
    }
    Ok(())
}

/// Run EP from flat sites.
pub fn ep_fit(k: &KernelMatrix, y: &[f64], bias: f64, opts: &EpOptions) -> Result<EpState> {
    ep_fit_from(k, y, bias, SiteParams::flat(k.n()), opts)
}

/// Run EP starting from `sites` (a warm start, e.g. the previous E-step).
pub fn ep_fit_from(
    k: &KernelMatrix,
    y: &[f64],
    bias: f64,
    mut sites: SiteParams,
    opts: &EpOptions,
) -> Result<EpState> {
    let n = k.n();
    check_labels(y, n)?;
    if sites.len() != n {
        return Err(Error::Input(format!("{} sites for {} examples", sites.len(), n)));
    }
    let kj = k.jittered();
    let mut post = SiteSystem::new(&kj, &sites)?.posterior(&kj, &sites);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for (i, &label) in y.iter().enumerate() {
            let cii = post.cov[(i, i)];
            let cav_tau = 1.0 / cii - sites.precision[i];
            if !(cav_tau > 0.0) || !(cii > 0.0) {
                continue;
            }
            let cav_var = 1.0 / cav_tau;
            let cav_mean = cav_var * (post.mean[i] / cii - sites.shift[i]);
            let Some(upd) = site_update(cav_mean, cav_var, label, bias)? else {
                continue;
            };
            let d_tau = upd.precision - sites.precision[i];
            let d_shift = upd.shift - sites.shift[i];
            let denom = 1.0 + d_tau * cii;
            if !(denom > 0.0) {
                continue;
            }
            let kappa = d_tau / denom;
            let s = post.cov.column(i).clone_owned();
            let mi = post.mean[i];
            let coef = d_shift - kappa * (mi + d_shift * cii);
            post.cov.ger(-kappa, &s, &s, 1.0);
            post.mean.axpy(coef, &s, 1.0);
            max_change = max_change.max(d_tau.abs()).max(d_shift.abs());
            sites.precision[i] = upd.precision;
            sites.shift[i] = upd.shift;
            sites.lognorm[i] = upd.lognorm;
        }
        // refresh from scratch so rank-one round-off does not accumulate
        post = SiteSystem::new(&kj, &sites)?.posterior(&kj, &sites);
        if max_change < opts.tol {
            converged = true;
            break;
        }
    }
    let cavity = cavity_from_posterior(&post, &sites).map_err(|e| Error::EpFailed(e.to_string()))?;
    let log_ml = evidence_with(&SiteSystem::new(&kj, &sites)?, &sites, &post.mean, &cavity, y, bias)?;
    Ok(EpState {
        sites,
        posterior: post,
        cavity,
        log_ml,
        sweeps_used: sweeps,
        converged,
    })
}

/// EP approximation of the log marginal likelihood:
/// −½ log|K+Σ| − ½ μᵀ(K+Σ)⁻¹μ + Σᵢ log wᵢ.
pub fn log_marginal_likelihood(
    k: &KernelMatrix,
    sites: &SiteParams,
    cavity: &Cavity,
    y: &[f64],
    bias: f64,
) -> Result<f64> {
    check_labels(y, k.n())?;
    if cavity.len() != k.n() {
        return Err(Error::Input("cavity size mismatch".into()));
    }
    let kj = k.jittered();
    let system = SiteSystem::new(&kj, sites)?;
    let (mean, _) = system.marginals(&kj, sites);
    evidence_with(&system, sites, &mean, cavity, y, bias)
}

/// Evidence in natural parameters. Using (K+Σ)⁻¹ = Σ⁻¹ − Σ⁻¹CΣ⁻¹ the
/// μᵀ(K+Σ)⁻¹μ term and the per-site quadratic terms combine into
/// expressions that stay finite for flat sites.
pub(crate) fn evidence_with(
    system: &SiteSystem,
    sites: &SiteParams,
    post_mean: &DVector<f64>,
    cavity: &Cavity,
    y: &[f64],
    bias: f64,
) -> Result<f64> {
    let shift = DVector::from_column_slice(&sites.shift);
    let mut value = -system.half_log_det() + 0.5 * shift.dot(post_mean);
    for (i, &label) in y.iter().enumerate() {
        let var = cavity.variance[i];
        if !(var > 0.0) {
            return Err(Error::NegativeCavity { index: i, variance: var });
        }
        let cav_tau = 1.0 / var;
        let cav_shift = cavity.mean[i] * cav_tau;
        let tau = sites.precision[i];
        let nu = sites.shift[i];
        value += 0.5 * (1.0 + tau * var).ln();
        value += 0.5 * (cav_shift * cav_shift * tau - 2.0 * cav_shift * nu * cav_tau - nu * nu * cav_tau)
            / (cav_tau * (cav_tau + tau));
        let z = label * (cavity.mean[i] + bias) / (1.0 + var).sqrt();
        value += normal::log_cdf(z);
    }
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite log marginal likelihood".into()));
    }
    Ok(value)
}

/// Latent and class predictions at test inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub latent_mean: f64,
    pub latent_variance: f64,
    /// p(y* = +1 | x*, S, θ)
    pub prob_pos: f64,
}

/// Predict test points from a fitted EP state.
pub fn predict(
    x_train: &DMatrix<f64>,
    state: &EpState,
    h: &Hyperparams,
    x_test: &DMatrix<f64>,
) -> Result<Vec<Prediction>> {
    let k = kernel_matrix(x_train, h)?;
    if state.sites.len() != k.n() {
        return Err(Error::Input("EP state does not match the training set".into()));
    }
    let kj = k.jittered();
    let system = SiteSystem::new(&kj, &state.sites)?;
    let ks = cross_kernel(x_train, x_test, h)?;
    // (K+Σ)⁻¹μ = ν̃ − τ̃ ∘ m
    let alpha = DVector::from_iterator(
        k.n(),
        (0..k.n()).map(|i| state.sites.shift[i] - state.sites.precision[i] * state.posterior.mean[i]),
    );
    let means = ks.tr_mul(&alpha);
    let v = system.half_solve(&ks);
    let beta0 = h.signal_variance();
    Ok((0..x_test.nrows())
        .map(|t| {
            let reduction = v.column(t).norm_squared();
            let var = (beta0 - reduction).clamp(f64::MIN_POSITIVE, beta0);
            let mu = means[t];
            Prediction {
                latent_mean: mu,
                latent_variance: var,
                prob_pos: normal::cdf((mu + h.bias) / (1.0 + var).sqrt()),
            }
        })
        .collect())
}
