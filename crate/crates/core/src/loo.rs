//! Leave-one-out predictive probabilities built from cavity moments and
//! their derivatives with the sites held fixed.

use crate::ep::{Cavity, Posterior, SiteParams, SiteSystem};
use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::normal;
use crate::parallel::Parallelism;
use nalgebra::{DMatrix, DVector};

/// pᵢ = p(yᵢ | xᵢ, S₋ᵢ, θ) for every training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LooPredictive {
    pub prob_label: Vec<f64>,
    pub prob_pos: Vec<f64>,
    /// log pᵢ evaluated without forming pᵢ, so it stays finite in the tails.
    pub log_prob_label: Vec<f64>,
    /// ∂pᵢ/∂θⱼ, n × |θ|.
    pub jac_label: Option<DMatrix<f64>>,
    pub jac_pos: Option<DMatrix<f64>>,
}

impl LooPredictive {
    pub fn len(&self) -> usize {
        self.prob_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob_label.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.jac_pos.as_ref().map_or(0, |j| j.ncols())
    }

    pub fn with_jacobian(mut self, jac_label: DMatrix<f64>, jac_pos: DMatrix<f64>) -> Result<Self> {
        if jac_label.nrows() != self.len() || jac_pos.shape() != jac_label.shape() {
            return Err(Error::Input("jacobian shape does not match".into()));
        }
        self.jac_label = Some(jac_label);
        self.jac_pos = Some(jac_pos);
        Ok(self)
    }
}

/// Per-parameter derivatives of the cavity moments, both n × p.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityDerivatives {
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

impl CavityDerivatives {
    pub fn n_params(&self) -> usize {
        self.mean.ncols()
    }
}

fn check_len(cavity: &Cavity, y: &[f64]) -> Result<()> {
    if cavity.len() != y.len() {
        return Err(Error::Input(format!("{} cavities for {} labels", cavity.len(), y.len())));
    }
    if let Some(i) = cavity.variance.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::NegativeCavity { index: i, variance: cavity.variance[i] });
    }
    Ok(())
}

/// pᵢ = Φ(yᵢ(μ₋ᵢ + γ)/√(1 + σ²₋ᵢ)).
pub fn loo_predictive(cavity: &Cavity, y: &[f64], bias: f64) -> Result<LooPredictive> {
    check_len(cavity, y)?;
    let n = y.len();
    let mut prob_label = Vec::with_capacity(n);
    let mut prob_pos = Vec::with_capacity(n);
    let mut log_prob_label = Vec::with_capacity(n);
    for (i, &label) in y.iter().enumerate() {
        let z = (cavity.mean[i] + bias) / (1.0 + cavity.variance[i]).sqrt();
        let pos = normal::cdf(z);
        prob_pos.push(pos);
        prob_label.push(normal::cdf(label * z));
        log_prob_label.push(normal::log_cdf(label * z));
    }
    Ok(LooPredictive {
        prob_label,
        prob_pos,
        log_prob_label,
        jac_label: None,
        jac_pos: None,
    })
}

/// Derivatives of every cavity moment for each ∂K/∂θⱼ in `dk`, holding the
/// sites fixed.
///
/// With R = I − (K+Σ)⁻¹K, ∂C = Rᵀ ∂K R and ∂m = Rᵀ ∂K R Σ⁻¹μ. Each
/// parameter costs one n³ product and parameters run in parallel.
pub fn cavity_derivatives(
    k: &KernelMatrix,
    dk: &[DMatrix<f64>],
    sites: &SiteParams,
    posterior: &Posterior,
    par: Parallelism,
) -> Result<CavityDerivatives> {
    let n = k.n();
    if sites.len() != n || posterior.mean.len() != n {
        return Err(Error::Input("sites, posterior and kernel differ in size".into()));
    }
    let kj = k.jittered();
    let system = SiteSystem::new(&kj, sites)?;
    cavity_derivatives_with(&system, &kj, dk, sites, &posterior.mean, &posterior.cov.diagonal(), par)
}

pub(crate) fn cavity_derivatives_with(
    system: &SiteSystem,
    kj: &DMatrix<f64>,
    dk: &[DMatrix<f64>],
    sites: &SiteParams,
    post_mean: &DVector<f64>,
    post_var: &DVector<f64>,
    par: Parallelism,
) -> Result<CavityDerivatives> {
    let n = kj.nrows();
    if let Some(j) = dk.iter().position(|d| d.shape() != (n, n)) {
        return Err(Error::Input(format!("kernel derivative {j} has the wrong shape")));
    }
    let r = DMatrix::identity(n, n) - system.solve(kj);
    let shift = DVector::from_column_slice(sites.shifts());
    let r_shift = &r * &shift;
    let tau = sites.precisions();

    let columns = par.map(dk, |dkj| {
        let m = dkj * &r;
        let mut d_cov = DVector::zeros(n);
        for i in 0..n {
            d_cov[i] = r.column(i).dot(&m.column(i));
        }
        let d_mean = r.tr_mul(&(dkj * &r_shift));
        (d_cov, d_mean)
    });

    let p = dk.len();
    let mut mean = DMatrix::zeros(n, p);
    let mut variance = DMatrix::zeros(n, p);
    for i in 0..n {
        let cii = post_var[i];
        let mi = post_mean[i];
        let cav_var = 1.0 / (1.0 / cii - tau[i]);
        if !(cav_var > 0.0) {
            return Err(Error::NegativeCavity { index: i, variance: cav_var });
        }
        let cav_mean = cav_var * (mi / cii - sites.shifts()[i]);
        let scale = cav_var / cii;
        for (j, (d_cov, d_mean)) in columns.iter().enumerate() {
            let dv = scale * scale * d_cov[i];
            variance[(i, j)] = dv;
            mean[(i, j)] = cav_mean / cav_var * dv + cav_var / (cii * cii) * (cii * d_mean[i] - mi * d_cov[i]);
        }
    }
    Ok(CavityDerivatives { mean, variance })
}

/// ∂pᵢ/∂θ for the label and positive-class probabilities. Columns follow
/// `derivs`, with the γ column inserted at `bias_col`.
pub fn predictive_jacobian(
    cavity: &Cavity,
    derivs: &CavityDerivatives,
    y: &[f64],
    bias: f64,
    bias_col: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_len(cavity, y)?;
    let n = y.len();
    let p = derivs.n_params();
    if derivs.mean.nrows() != n || bias_col > p {
        return Err(Error::Input("cavity derivatives do not match".into()));
    }
    let mut jac_pos = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        let s = (1.0 + cavity.variance[i]).sqrt();
        let z = (cavity.mean[i] + bias) / s;
        let g = normal::pdf(z) / s;
        for j in 0..=p {
            jac_pos[(i, j)] = if j == bias_col {
                g
            } else {
                let src = if j < bias_col { j } else { j - 1 };
                g * (derivs.mean[(i, src)] - 0.5 * z / s * derivs.variance[(i, src)])
            };
        }
    }
    let mut jac_label = jac_pos.clone();
    for (i, mut row) in jac_label.row_iter_mut().enumerate() {
        row *= y[i];
    }
    Ok((jac_label, jac_pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ep::{cavity_from_posterior, ep_fit, posterior_from_sites, EpOptions};
    use crate::kernel::{kernel_grads, kernel_matrix, Hyperparams, KernelMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fitted(seed: u64, n: usize) -> (DMatrix<f64>, Vec<f64>, Hyperparams, SiteParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.5..1.5));
        let y: Vec<f64> = (0..n)
            .map(|i| if x[(i, 0)] - 0.5 * x[(i, 1)] + 0.4 * rng.random_range(-1.0..1.0) > 0.0 { 1.0 } else { -1.0 })
            .collect();
        let mut h = Hyperparams::initial(2, KernelMode::Ard, false);
        h.log_signal_variance = rng.random_range(0.0..1.0);
        h.log_lengthscales = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        h.bias = rng.random_range(-0.3..0.3);
        let k = kernel_matrix(&x, &h).unwrap();
        let s = ep_fit(&k, &y, h.bias, &EpOptions::default()).unwrap();
        (x, y, h, s.sites)
    }

    fn frozen_cavity(x: &DMatrix<f64>, h: &Hyperparams, sites: &SiteParams) -> Cavity {
        let k = kernel_matrix(x, h).unwrap();
        let post = posterior_from_sites(&k, sites).unwrap();
        cavity_from_posterior(&post, sites).unwrap()
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-8)
    }

    #[test]
    fn predictive_reference_values() {
        let cav = Cavity { mean: vec![0.0, 0.0], variance: vec![0.4, 2.0] };
        let p = loo_predictive(&cav, &[1.0, -1.0], 0.0).unwrap();
        assert_eq!(p.prob_label, vec![0.5, 0.5]);
        let cav = Cavity { mean: vec![1.0], variance: vec![0.0] };
        let p = loo_predictive(&cav, &[1.0], 0.0).unwrap();
        assert!((p.prob_label[0] - 0.841_344_746_068_543).abs() < 1e-12);
        let p = loo_predictive(&cav, &[-1.0], 40.0).unwrap();
        assert_eq!(p.prob_pos[0], 1.0);
        assert!(p.log_prob_label[0].is_finite());
        assert!((p.prob_label[0] - (1.0 - p.prob_pos[0])).abs() < 1e-15);
    }

    #[test]
    fn constant_kernel_parameter_gives_zero_derivatives() {
        let (x, _, h, sites) = fitted(1, 5);
        let k = kernel_matrix(&x, &h).unwrap();
        let post = posterior_from_sites(&k, &sites).unwrap();
        let d = cavity_derivatives(&k, &[DMatrix::zeros(5, 5)], &sites, &post, Parallelism::Sequential).unwrap();
        assert_eq!(d.mean.amax(), 0.0);
        assert_eq!(d.variance.amax(), 0.0);
    }

    #[test]
    fn single_site_derivatives_follow_the_prior() {
        let x = DMatrix::from_row_slice(1, 1, &[0.3]);
        let h = Hyperparams::initial(1, KernelMode::Shared, false);
        let k = kernel_matrix(&x, &h).unwrap();
        let s = ep_fit(&k, &[1.0], 0.0, &EpOptions::default()).unwrap();
        let dk = kernel_grads(&x, &h, &k);
        let d = cavity_derivatives(&k, &dk, &s.sites, &s.posterior, Parallelism::Sequential).unwrap();
        assert!((d.variance[(0, 0)] - dk[0][(0, 0)]).abs() < 1e-6);
        assert!(d.mean[(0, 0)].abs() < 1e-8);
    }

    #[test]
    fn cavity_derivatives_match_finite_differences() {
        let step = 1e-5;
        for seed in 0..4 {
            let (x, _, h, sites) = fitted(seed, 6);
            let k = kernel_matrix(&x, &h).unwrap();
            let post = posterior_from_sites(&k, &sites).unwrap();
            let dk = kernel_grads(&x, &h, &k);
            for par in [Parallelism::Sequential, Parallelism::Rayon] {
                let d = cavity_derivatives(&k, &dk, &sites, &post, par).unwrap();
                let p = dk.len();
                let mut fd_mean = DMatrix::zeros(6, p);
                let mut fd_var = DMatrix::zeros(6, p);
                for j in 0..p {
                    let mut plus = h.to_vec();
                    let mut minus = h.to_vec();
                    plus[j] += step;
                    minus[j] -= step;
                    let cp = frozen_cavity(&x, &h.with_values(&plus).unwrap(), &sites);
                    let cm = frozen_cavity(&x, &h.with_values(&minus).unwrap(), &sites);
                    for i in 0..6 {
                        fd_mean[(i, j)] = (cp.mean[i] - cm.mean[i]) / (2.0 * step);
                        fd_var[(i, j)] = (cp.variance[i] - cm.variance[i]) / (2.0 * step);
                    }
                }
                assert!(rel_err(&d.mean, &fd_mean) < 1e-4, "seed {seed}");
                assert!(rel_err(&d.variance, &fd_var) < 1e-4, "seed {seed}");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let step = 1e-5;
        for seed in 0..4 {
            let (x, y, h, sites) = fitted(seed + 10, 7);
            let k = kernel_matrix(&x, &h).unwrap();
            let post = posterior_from_sites(&k, &sites).unwrap();
            let cav = cavity_from_posterior(&post, &sites).unwrap();
            let dk = kernel_grads(&x, &h, &k);
            let d = cavity_derivatives(&k, &dk, &sites, &post, Parallelism::Sequential).unwrap();
            let bias_col = h.bias_index();
            let (jl, jp) = predictive_jacobian(&cav, &d, &y, h.bias, bias_col).unwrap();
            let theta = h.to_vec();
            let mut fd = DMatrix::zeros(7, theta.len());
            for j in 0..theta.len() {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[j] += step;
                minus[j] -= step;
                let hp = h.with_values(&plus).unwrap();
                let hm = h.with_values(&minus).unwrap();
                let pp = loo_predictive(&frozen_cavity(&x, &hp, &sites), &y, hp.bias).unwrap();
                let pm = loo_predictive(&frozen_cavity(&x, &hm, &sites), &y, hm.bias).unwrap();
                for i in 0..7 {
                    fd[(i, j)] = (pp.prob_label[i] - pm.prob_label[i]) / (2.0 * step);
                }
            }
            assert!(rel_err(&jl, &fd) < 1e-4, "seed {seed}: {}", rel_err(&jl, &fd));
            for i in 0..7 {
                assert!((jp[(i, bias_col)] * y[i] - jl[(i, bias_col)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bias_column_reference_and_tails() {
        let cav = Cavity { mean: vec![0.0, 50.0], variance: vec![0.6, 0.2] };
        let d = CavityDerivatives {
            mean: DMatrix::from_element(2, 1, 1.0),
            variance: DMatrix::from_element(2, 1, 1.0),
        };
        let (jl, _) = predictive_jacobian(&cav, &d, &[-1.0, 1.0], 0.0, 1).unwrap();
        let expect = -normal::pdf(0.0) / 1.6f64.sqrt();
        assert!((jl[(0, 1)] - expect).abs() < 1e-15);
        assert_eq!(jl[(1, 0)], 0.0);
        assert_eq!(jl[(1, 1)], 0.0);
    }
}
