//! Bayesian linear regression with an isotropic Gaussian prior and Gaussian
//! noise: posterior fitting, predictive distribution, evidence-maximizing
//! hyperparameters and confidence intervals.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::erf_inv;

pub const BETA_MIN: f64 = 1e-8;
pub const BETA_MAX: f64 = 1e8;
pub const ALPHA_MIN: f64 = 1e-8;
pub const ALPHA_MAX: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BlrError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dataset is empty")]
    Empty,
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("hyperparameters must be positive (alpha = {alpha}, beta = {beta})")]
    BadHyperparameters { alpha: f64, beta: f64 },
    #[error("posterior precision is not positive definite")]
    NotPositiveDefinite,
}

/// Observations `(x_i, y_i)` with a shared input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> Result<Self, BlrError> {
        let dim = xs.first().map(Vec::len).ok_or(BlrError::Empty)?;
        if xs.len() != ys.len() {
            return Err(BlrError::DimensionMismatch { expected: xs.len(), got: ys.len() });
        }
        for x in &xs {
            if x.len() != dim {
                return Err(BlrError::DimensionMismatch { expected: dim, got: x.len() });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(BlrError::NonFinite("inputs"));
            }
        }
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(BlrError::NonFinite("targets"));
        }
        Ok(Self { xs, ys, dim })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn targets(&self) -> &[f64] {
        &self.ys
    }

    fn design(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim, |r, c| self.xs[r][c])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlrPosterior {
    pub mu_theta: Vec<f64>,
    /// Row-major `M x M` covariance.
    pub sigma_theta: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

/// Predictive Gaussian `N(mu, sigma2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPred {
    pub mu: f64,
    pub sigma2: f64,
}

impl GaussianPred {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        Self { mu, sigma2 }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.max(0.0).sqrt()
    }
}

impl BlrPosterior {
    pub fn dim(&self) -> usize {
        self.mu_theta.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_row_slice(m, m, &self.sigma_theta)
    }

    /// Posterior with no data: `N(0, alpha^{-1} I)`.
    pub fn prior(dim: usize, alpha: f64, beta: f64) -> Self {
        let mut sigma = vec![0.0; dim * dim];
        for i in 0..dim {
            sigma[i * dim + i] = 1.0 / alpha;
        }
        Self { mu_theta: vec![0.0; dim], sigma_theta: sigma, alpha, beta }
    }
}

/// Posterior `N(mu, Sigma)` with `Sigma^{-1} = beta X^T X + alpha I` and
/// `mu = beta Sigma X^T Y`, solved through a Cholesky factorization.
pub fn fit(data: &Dataset, alpha: f64, beta: f64) -> Result<BlrPosterior, BlrError> {
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(BlrError::BadHyperparameters { alpha, beta });
    }
    let x = data.design();
    let y = DVector::from_column_slice(data.targets());
    let precision = x.tr_mul(&x) * beta + DMatrix::identity(data.dim(), data.dim()) * alpha;
    let chol = precision.cholesky().ok_or(BlrError::NotPositiveDefinite)?;
    let mu = chol.solve(&(x.tr_mul(&y) * beta));
    let sigma = chol.inverse();
    // symmetrize against round-off
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(BlrPosterior {
        mu_theta: mu.iter().copied().collect(),
        sigma_theta: sigma.transpose().iter().copied().collect(),
        alpha,
        beta,
    })
}

/// Predictive mean `mu^T x` and variance `x^T Sigma x + 1/beta`.
pub fn predict(post: &BlrPosterior, x_star: &[f64]) -> Result<GaussianPred, BlrError> {
    let m = post.dim();
    if x_star.len() != m {
        return Err(BlrError::DimensionMismatch { expected: m, got: x_star.len() });
    }
    let mu = post.mu_theta.iter().zip(x_star).map(|(a, b)| a * b).sum();
    let mut quad = 0.0;
    for r in 0..m {
        let row: f64 = (0..m).map(|c| post.sigma_theta[r * m + c] * x_star[c]).sum();
        quad += x_star[r] * row;
    }
    Ok(GaussianPred { mu, sigma2: quad.max(0.0) + 1.0 / post.beta })
}

/// Evidence-maximizing `(alpha, beta)` via the standard fixed-point updates.
///
/// `gamma = sum lambda_i / (alpha + lambda_i)` over eigenvalues of
/// `beta X^T X`, then `alpha = gamma / mu^T mu` and
/// `beta = (N - gamma) / sum r_i^2`. Both are clamped to `[1e-8, 1e8]`.
pub fn empirical_bayes(data: &Dataset, max_iter: usize, tol: f64) -> Result<(f64, f64), BlrError> {
    let n = data.len();
    if n < 2 {
        return Err(BlrError::TooFewObservations { need: 2, got: n });
    }
    let x = data.design();
    let y = DVector::from_column_slice(data.targets());
    let gram = x.tr_mul(&x);
    let base_eigs: Vec<f64> =
        SymmetricEigen::new(gram.clone()).eigenvalues.iter().map(|l| l.max(0.0)).collect();
    let xty = x.tr_mul(&y);
    let m = data.dim();

    let (mut alpha, mut beta) = (1.0_f64, 1.0_f64);
    for _ in 0..max_iter.max(1) {
        let precision = &gram * beta + DMatrix::identity(m, m) * alpha;
        let chol = precision.cholesky().ok_or(BlrError::NotPositiveDefinite)?;
        let mu = chol.solve(&(&xty * beta));
        let gamma: f64 = base_eigs.iter().map(|l| beta * l / (alpha + beta * l)).sum();
        let resid = &y - &x * &mu;
        let sse = resid.norm_squared();
        let mm = mu.norm_squared();

        let alpha_new = if mm > 0.0 { (gamma / mm).clamp(ALPHA_MIN, ALPHA_MAX) } else { ALPHA_MAX };
        let beta_new = if sse > 0.0 {
            ((n as f64 - gamma).max(0.0) / sse).clamp(BETA_MIN, BETA_MAX)
        } else {
            BETA_MAX
        };
        let converged = (alpha_new - alpha).abs() <= tol * alpha.max(1e-300)
            && (beta_new - beta).abs() <= tol * beta.max(1e-300);
        alpha = alpha_new;
        beta = beta_new;
        if converged {
            break;
        }
    }
    Ok((alpha, beta))
}

/// Symmetric `zeta` confidence interval `mu ± sqrt(2) erf^{-1}(zeta) sigma`.
pub fn confidence_interval(pred: &GaussianPred, zeta: f64) -> (f64, f64) {
    let half = std::f64::consts::SQRT_2 * erf_inv(zeta) * pred.sigma();
    (pred.mu - half, pred.mu + half)
}
