use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numstat::{standard_normal_vector, Ensemble, SpdMatrix};

/// Weighted sum of Gaussian components.
///
/// Weights are kept both linearly and in log form; each covariance carries its
/// own Cholesky factor so densities and draws never refactorize.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: DMatrix<f64>,
    covariances: Vec<SpdMatrix>,
}

impl GaussianMixture {
    /// `means` holds one component mean per column.
    pub fn new(weights: Vec<f64>, means: DMatrix<f64>, covariances: Vec<SpdMatrix>) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(Error::EmptyInput);
        }
        if means.ncols() != m {
            return Err(Error::DimensionMismatch { expected: m, got: means.ncols() });
        }
        if covariances.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: covariances.len() });
        }
        let n = means.nrows();
        if let Some(bad) = covariances.iter().find(|c| c.dim() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: bad.dim() });
        }
        if !means.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence("mixture mean is not finite".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}")));
        }
        let weights: Vec<f64> = if total == 1.0 { weights } else { weights.into_iter().map(|w| w / total).collect() };
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, log_weights, means, covariances })
    }

    /// Equal weights `1 / M`, one component per particle.
    pub fn uniform(centers: &Ensemble, covariances: Vec<SpdMatrix>) -> Result<Self> {
        let m = centers.len();
        let mut mixture = Self::new(vec![1.0 / m as f64; m], centers.states().clone(), covariances)?;
        mixture.weights.fill(1.0 / m as f64);
        mixture.log_weights.fill(-(m as f64).ln());
        Ok(mixture)
    }

    /// Builds a mixture from log-weights, normalizing them with log-sum-exp.
    pub fn from_log_weights(log_weights: &[f64], means: DMatrix<f64>, covariances: Vec<SpdMatrix>) -> Result<Self> {
        let lse = crate::numstat::logsumexp(log_weights)?;
        if !lse.is_finite() {
            return Err(Error::Divergence(format!("mixture log-weight normalizer is {lse}")));
        }
        let log_weights: Vec<f64> = log_weights.iter().map(|a| a - lse).collect();
        let weights: Vec<f64> = log_weights.iter().map(|a| a.exp()).collect();
        let mut mixture = Self::new(weights, means, covariances)?;
        mixture.log_weights = log_weights;
        Ok(mixture)
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        let n = self.dim();
        &self.means.as_slice()[j * n..(j + 1) * n]
    }

    pub fn covariance(&self, j: usize) -> &SpdMatrix {
        &self.covariances[j]
    }

    pub fn covariances(&self) -> &[SpdMatrix] {
        &self.covariances
    }

    /// Log-density at `x`.
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let terms: Vec<f64> = (0..self.len())
            .map(|j| self.log_weights[j] + self.covariances[j].log_density(x, self.mean(j)))
            .collect();
        crate::numstat::logsumexp(&terms).expect("mixture is non-empty")
    }

    /// Draws `count` particles: a component index from the weights by inverse
    /// CDF (one uniform per particle), then a Gaussian draw from it.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Ensemble> {
        let mut cdf = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let n = self.dim();
        let mut out = DMatrix::zeros(n, count);
        for col in 0..count {
            let u = rng.random::<f64>() * acc;
            let j = cdf.partition_point(|&c| c <= u).min(self.len() - 1);
            let z = standard_normal_vector(n, rng);
            let draw = self.covariances[j].lower() * z;
            for i in 0..n {
                out[(i, col)] = self.means[(i, j)] + draw[i];
            }
        }
        Ensemble::new(out)
    }

    /// Mixture mean and covariance (law of total covariance).
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut mean = DVector::zeros(n);
        for (j, w) in self.weights.iter().enumerate() {
            for (m, v) in mean.iter_mut().zip(self.mean(j)) {
                *m += w * v;
            }
        }
        let mut cov = DMatrix::zeros(n, n);
        for (j, w) in self.weights.iter().enumerate() {
            let c = self.covariances[j].matrix();
            let mu = self.mean(j);
            for col in 0..n {
                let dc = mu[col] - mean[col];
                for row in 0..n {
                    cov[(row, col)] += w * (c[(row, col)] + (mu[row] - mean[row]) * dc);
                }
            }
        }
        crate::numstat::symmetrize(&mut cov);
        (mean, cov)
    }
}

/// Free-function form of [`GaussianMixture::logpdf`].
pub fn gmm_logpdf(g: &GaussianMixture, x: &DVector<f64>) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::DimensionMismatch { expected: g.dim(), got: x.len() });
    }
    Ok(g.logpdf(x.as_slice()))
}

pub fn gmm_sample<R: Rng + ?Sized>(g: &GaussianMixture, count: usize, rng: &mut R) -> Result<Ensemble> {
    g.sample(count, rng)
}

pub fn gmm_moments(g: &GaussianMixture) -> (DVector<f64>, DMatrix<f64>) {
    g.moments()
}
