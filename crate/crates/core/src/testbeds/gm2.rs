use nalgebra::{dmatrix, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kde::GaussianMixture;
use crate::numstat::{Ensemble, SpdMatrix};

/// Equal-weight pair of correlated Gaussians centered at `(0, +upsilon)`
/// and `(0, -upsilon)`, each with covariance `[[1, rho], [rho, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gm2Distribution {
    rho: f64,
    upsilon: f64,
}

impl Gm2Distribution {
    pub fn new(rho: f64, upsilon: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!("correlation must lie in (-1, 1), got {rho}")));
        }
        if !(upsilon >= 0.0) || !upsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("separation must be nonnegative, got {upsilon}")));
        }
        Ok(Self { rho, upsilon })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn upsilon(&self) -> f64 {
        self.upsilon
    }

    /// Covariance of each mode.
    pub fn local_covariance(&self) -> DMatrix<f64> {
        dmatrix![1.0, self.rho; self.rho, 1.0]
    }

    /// Covariance of the whole mixture.
    pub fn global_covariance(&self) -> DMatrix<f64> {
        dmatrix![1.0, self.rho; self.rho, 1.0 + self.upsilon * self.upsilon]
    }

    /// Unit eigenvector of the largest eigenvalue of the global covariance.
    pub fn dominant_eigenvector(&self) -> DVector<f64> {
        if self.rho == 0.0 {
            return DVector::from_column_slice(&[0.0, 1.0]);
        }
        let u2 = self.upsilon * self.upsilon;
        let first = (-u2 + (u2 * u2 + 4.0 * self.rho * self.rho).sqrt()) / (2.0 * self.rho);
        DVector::from_column_slice(&[first, 1.0]).normalize()
    }

    pub fn as_mixture(&self) -> Result<GaussianMixture> {
        let cov = SpdMatrix::new(self.local_covariance())?;
        let means = dmatrix![0.0, 0.0; self.upsilon, -self.upsilon];
        GaussianMixture::new(vec![0.5, 0.5], means, vec![cov.clone(), cov])
    }

    pub fn log_pdf(&self, x: &[f64; 2]) -> f64 {
        self.as_mixture().expect("valid by construction").logpdf(x)
    }

    pub fn pdf(&self, x: &[f64; 2]) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Ensemble> {
        self.as_mixture()?.sample(count, rng)
    }
}
