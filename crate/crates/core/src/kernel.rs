//! ARD squared-exponential covariance and its derivatives with respect to
//! the log-parameterized hyperparameters.
//!
//! k(xᵢ, xⱼ) = β₀ exp(−½ Σₖ (xᵢₖ − xⱼₖ)² / βₖ)
//!
//! βₖ divides the squared distance directly, so it is a squared length
//! scale. All positive quantities are stored as logarithms; the flat
//! parameter vector used by the optimizers is laid out as
//! `[log β₀, log β₁ … log β_L, γ, (log λ)]` where L is 1 in shared mode and
//! D in ARD mode.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Relative diagonal jitter (times β₀) applied before factorizations
/// involving K.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// One width per input dimension.
    Ard,
    /// A single width shared by all dimensions.
    Shared,
}

/// Role of one entry in the flat hyperparameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    SignalVariance,
    Width(usize),
    Bias,
    Ridge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// log β₀
    pub log_signal_variance: f64,
    /// log βₖ, length 1 (shared) or D (ARD).
    pub log_lengthscales: Vec<f64>,
    /// γ, the probit offset.
    pub bias: f64,
    /// log λ, only used by the least-squares baseline.
    pub log_ridge: Option<f64>,
}

impl Hyperparams {
    /// Neutral starting point for standardized inputs: β₀ = 1, βₖ = D,
    /// γ = 0 and, when requested, λ = 0.01.
    pub fn initial(dim: usize, mode: KernelMode, with_ridge: bool) -> Self {
        let dim = dim.max(1);
        let widths = match mode {
            KernelMode::Ard => dim,
            KernelMode::Shared => 1,
        };
        Hyperparams {
            log_signal_variance: 0.0,
            log_lengthscales: vec![(dim as f64).ln(); widths],
            bias: 0.0,
            log_ridge: with_ridge.then(|| 0.01f64.ln()),
        }
    }

    pub fn mode(&self) -> KernelMode {
        if self.log_lengthscales.len() == 1 {
            KernelMode::Shared
        } else {
            KernelMode::Ard
        }
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn ridge(&self) -> Option<f64> {
        self.log_ridge.map(f64::exp)
    }

    /// Number of parameters that enter the kernel (β₀ and the widths).
    pub fn n_kernel_params(&self) -> usize {
        1 + self.log_lengthscales.len()
    }

    pub fn bias_index(&self) -> usize {
        self.n_kernel_params()
    }

    pub fn ridge_index(&self) -> Option<usize> {
        self.log_ridge.map(|_| self.bias_index() + 1)
    }

    pub fn len(&self) -> usize {
        self.n_kernel_params() + 1 + usize::from(self.log_ridge.is_some())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kind(&self, index: usize) -> Option<ParamKind> {
        let nk = self.n_kernel_params();
        match index {
            0 => Some(ParamKind::SignalVariance),
            i if i < nk => Some(ParamKind::Width(i - 1)),
            i if i == nk => Some(ParamKind::Bias),
            i if i == nk + 1 && self.log_ridge.is_some() => Some(ParamKind::Ridge),
            _ => None,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.log_signal_variance);
        v.extend_from_slice(&self.log_lengthscales);
        v.push(self.bias);
        if let Some(r) = self.log_ridge {
            v.push(r);
        }
        v
    }

    /// Same layout as `self`, values taken from `values`.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Input(format!(
                "expected {} hyperparameters, got {}",
                self.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite hyperparameter".into()));
        }
        let nk = self.n_kernel_params();
        Ok(Hyperparams {
            log_signal_variance: values[0],
            log_lengthscales: values[1..nk].to_vec(),
            bias: values[nk],
            log_ridge: self.log_ridge.map(|_| values[nk + 1]),
        })
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let l = self.log_lengthscales.len();
        if dim == 0 {
            return Err(Error::Input("feature dimension must be at least 1".into()));
        }
        if l != 1 && l != dim {
            return Err(Error::Input(format!(
                "{l} widths for {dim}-dimensional inputs (expected 1 or {dim})"
            )));
        }
        Ok(())
    }

    fn inverse_widths(&self, dim: usize) -> Vec<f64> {
        if self.log_lengthscales.len() == 1 {
            vec![(-self.log_lengthscales[0]).exp(); dim]
        } else {
            self.log_lengthscales.iter().map(|l| (-l).exp()).collect()
        }
    }
}

/// Symmetric n×n prior covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    signal_variance: f64,
}

impl KernelMatrix {
    /// Wrap an explicit covariance (used by tests and oracles).
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(Error::Input("kernel matrix must be square and non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("kernel matrix has non-finite entries".into()));
        }
        let signal_variance = values.diagonal().max();
        Ok(KernelMatrix { values, signal_variance })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    /// K + JITTER·β₀·I
    pub fn jittered(&self) -> DMatrix<f64> {
        let mut k = self.values.clone();
        let eps = JITTER * self.signal_variance;
        for i in 0..k.nrows() {
            k[(i, i)] += eps;
        }
        k
    }
}

fn check_features(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Input("feature matrix must be non-empty".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite feature value".into()));
    }
    Ok(())
}

fn scaled_sqdist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize, inv_w: &[f64]) -> f64 {
    inv_w
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let d = a[(i, k)] - b[(j, k)];
            d * d * w
        })
        .sum()
}

/// Prior covariance of the rows of `x`.
pub fn kernel_matrix(x: &DMatrix<f64>, h: &Hyperparams) -> Result<KernelMatrix> {
    check_features(x)?;
    h.check_dim(x.ncols())?;
    let n = x.nrows();
    let beta0 = h.signal_variance();
    let inv_w = h.inverse_widths(x.ncols());
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = beta0;
        for i in (j + 1)..n {
            let v = beta0 * (-0.5 * scaled_sqdist(x, i, x, j, &inv_w)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(KernelMatrix { values: k, signal_variance: beta0 })
}

/// Covariance between the rows of `a` (rows of the result) and `b`.
pub fn cross_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, h: &Hyperparams) -> Result<DMatrix<f64>> {
    check_features(a)?;
    check_features(b)?;
    if a.ncols() != b.ncols() {
        return Err(Error::Input(format!(
            "dimension mismatch: {} vs {} features",
            a.ncols(),
            b.ncols()
        )));
    }
    h.check_dim(a.ncols())?;
    let beta0 = h.signal_variance();
    let inv_w = h.inverse_widths(a.ncols());
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        beta0 * (-0.5 * scaled_sqdist(a, i, b, j, &inv_w)).exp()
    }))
}

/// ∂K/∂θⱼ for the log parameter at flat index `j`. Bias and ridge entries
/// have no kernel dependence and yield a zero matrix.
pub fn kernel_grad(x: &DMatrix<f64>, h: &Hyperparams, j: usize) -> Result<DMatrix<f64>> {
    let kind = h
        .kind(j)
        .ok_or_else(|| Error::Input(format!("hyperparameter index {j} out of range ({})", h.len())))?;
    let k = kernel_matrix(x, h)?;
    Ok(grad_from_kernel(x, h, &k, kind))
}

/// ∂K/∂θⱼ for every kernel parameter (β₀ then the widths), sharing one
/// evaluation of K.
pub fn kernel_grads(x: &DMatrix<f64>, h: &Hyperparams, k: &KernelMatrix) -> Vec<DMatrix<f64>> {
    (0..h.n_kernel_params())
        .map(|j| grad_from_kernel(x, h, k, h.kind(j).expect("kernel index")))
        .collect()
}

fn grad_from_kernel(x: &DMatrix<f64>, h: &Hyperparams, k: &KernelMatrix, kind: ParamKind) -> DMatrix<f64> {
    let n = k.n();
    match kind {
        ParamKind::SignalVariance => k.matrix().clone(),
        ParamKind::Bias | ParamKind::Ridge => DMatrix::zeros(n, n),
        ParamKind::Width(w) => {
            let inv_w = h.inverse_widths(x.ncols());
            let dims: Vec<usize> = if h.log_lengthscales.len() == 1 {
                (0..x.ncols()).collect()
            } else {
                vec![w]
            };
            let km = k.matrix();
            let mut g = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in (j + 1)..n {
                    let s: f64 = dims
                        .iter()
                        .map(|&d| {
                            let diff = x[(i, d)] - x[(j, d)];
                            diff * diff * inv_w[d]
                        })
                        .sum();
                    let v = km[(i, j)] * 0.5 * s;
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
            g
        }
    }
}
