//! Least-squares LOO baseline: closed-form leave-one-out moments of GP
//! ridge regression on the ±1 labels, squashed through the probit.

use crate::ep::Prediction;
use crate::error::{Error, Result};
use crate::kernel::{cross_kernel, kernel_matrix, Hyperparams, KernelMatrix};
use crate::loo::CavityDerivatives;
use crate::normal;
use crate::parallel::Parallelism;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct LsLooState {
    /// (K + λI)⁻¹ y
    pub alpha: DVector<f64>,
    /// (K + λI)⁻¹
    pub kbar: DMatrix<f64>,
    pub loo_mean: Vec<f64>,
    pub loo_var: Vec<f64>,
}

fn regularized_inverse(k: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::Input(format!("ridge must be positive, got {ridge}")));
    }
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("Cholesky of K + λI failed".into()))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// LOO mean yᵢ − α̃ᵢ/K̄ᵢᵢ and variance 1/K̄ᵢᵢ from one factorization.
pub fn ls_loo(k: &KernelMatrix, y: &[f64], ridge: f64) -> Result<LsLooState> {
    let n = k.n();
    if y.len() != n {
        return Err(Error::Input(format!("{} labels for {} examples", y.len(), n)));
    }
    let kbar = regularized_inverse(k.matrix(), ridge)?;
    let alpha = &kbar * DVector::from_column_slice(y);
    let loo_var: Vec<f64> = (0..n).map(|i| 1.0 / kbar[(i, i)]).collect();
    let loo_mean = (0..n).map(|i| y[i] - alpha[i] * loo_var[i]).collect();
    Ok(LsLooState { alpha, kbar, loo_mean, loo_var })
}

/// ∂(K + λI)/∂log λ
pub fn ridge_grad(n: usize, ridge: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal_element(n, n, ridge)
}

/// Derivatives of the LOO moments for each ∂(K + λI)/∂θⱼ in `dk`; pass
/// `ridge_grad` for the log λ coordinate.
pub fn ls_loo_derivatives(dk: &[DMatrix<f64>], state: &LsLooState, par: Parallelism) -> Result<CavityDerivatives> {
    let n = state.alpha.len();
    if let Some(j) = dk.iter().position(|d| d.shape() != (n, n)) {
        return Err(Error::Input(format!("kernel derivative {j} has the wrong shape")));
    }
    let kbar = &state.kbar;
    let columns = par.map(dk, |d| {
        // ∂K̄ = −K̄ D K̄
        let kd = kbar * d;
        let diag: Vec<f64> = (0..n).map(|i| kd.row(i).dot(&kbar.column(i).transpose())).collect();
        let d_alpha = -(kbar * (d * &state.alpha));
        (diag, d_alpha)
    });
    let p = dk.len();
    let mut mean = DMatrix::zeros(n, p);
    let mut variance = DMatrix::zeros(n, p);
    for (j, (diag, d_alpha)) in columns.iter().enumerate() {
        for i in 0..n {
            let var = state.loo_var[i];
            let dv = var * var * diag[i];
            variance[(i, j)] = dv;
            mean[(i, j)] = -var * d_alpha[i] - state.alpha[i] * dv;
        }
    }
    Ok(CavityDerivatives { mean, variance })
}

/// Test predictions of the regularized regressor; the predictive variance
/// includes the ridge so that it matches the LOO variance convention.
pub fn ls_predict(x_train: &DMatrix<f64>, y: &[f64], h: &Hyperparams, x_test: &DMatrix<f64>) -> Result<Vec<Prediction>> {
    let ridge = h
        .ridge()
        .ok_or_else(|| Error::Input("least-squares prediction needs a ridge parameter".into()))?;
    let k = kernel_matrix(x_train, h)?;
    let state = ls_loo(&k, y, ridge)?;
    let ks = cross_kernel(x_train, x_test, h)?;
    let means = ks.tr_mul(&state.alpha);
    let reduce = &state.kbar * &ks;
    let beta0 = h.signal_variance();
    Ok((0..x_test.nrows())
        .map(|t| {
            let var = (beta0 + ridge - ks.column(t).dot(&reduce.column(t))).max(f64::MIN_POSITIVE);
            let mu = means[t];
            Prediction {
                latent_mean: mu,
                latent_variance: var,
                prob_pos: normal::cdf((mu + h.bias) / (1.0 + var).sqrt()),
            }
        })
        .collect())
}
