use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::fresnel::fresnel;
use crate::error::{Error, Result};
use crate::kde::GaussianMixture;
use crate::numstat::{logsumexp, Ensemble, SpdMatrix, LN_2PI};

/// Upper end of the curve parameter; the curve runs over `z in [0, 4 pi]`.
pub const SPIRAL_Z_MAX: f64 = 4.0 * PI;
const SPIRAL_SCALE: f64 = 1.5;

/// Point on the Fermat spiral `1.5 sqrt(z) (cos z, sin z)`.
pub fn spiral_mean(z: f64) -> [f64; 2] {
    let r = SPIRAL_SCALE * z.sqrt();
    [r * z.cos(), r * z.sin()]
}

/// Isotropic Gaussian blur of a uniform density on the Fermat spiral,
/// i.e. a continuous Gaussian mixture indexed by the curve parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpiralDistribution {
    /// Variance of each isotropic component.
    pub sigma2: f64,
    /// Midpoint-rule nodes used to evaluate the density.
    pub quadrature_points: usize,
}

impl Default for SpiralDistribution {
    fn default() -> Self {
        Self { sigma2: 2f64.powi(-8), quadrature_points: 10_000 }
    }
}

impl SpiralDistribution {
    pub fn new(sigma2: f64, quadrature_points: usize) -> Result<Self> {
        let d = Self { sigma2, quadrature_points };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.quadrature_points < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 quadrature points, got {}",
                self.quadrature_points
            )));
        }
        Ok(())
    }

    /// Midpoint-rule nodes on `[0, 4 pi]`.
    pub fn quadrature_nodes(&self) -> impl Iterator<Item = f64> {
        let q = self.quadrature_points;
        let h = SPIRAL_Z_MAX / q as f64;
        (0..q).map(move |k| (k as f64 + 0.5) * h)
    }

    /// One exact draw: uniform curve parameter plus isotropic noise.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let z = rng.random::<f64>() * SPIRAL_Z_MAX;
        let m = spiral_mean(z);
        let sd = self.sigma2.sqrt();
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        [m[0] + sd * e0, m[1] + sd * e1]
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Ensemble> {
        let mut out = DMatrix::zeros(2, count);
        for j in 0..count {
            out.column_mut(j).copy_from_slice(&self.sample_point(rng));
        }
        Ensemble::new(out)
    }

    /// Log-density by midpoint quadrature over the curve parameter.
    pub fn log_pdf(&self, x: &[f64; 2]) -> f64 {
        let q = self.quadrature_points as f64;
        let norm = -LN_2PI - self.sigma2.ln() - q.ln();
        let terms: Vec<f64> = self
            .quadrature_nodes()
            .map(|z| {
                let m = spiral_mean(z);
                let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                norm - 0.5 * d2 / self.sigma2
            })
            .collect();
        logsumexp(&terms).expect("quadrature has nodes")
    }

    pub fn pdf(&self, x: &[f64; 2]) -> f64 {
        self.log_pdf(x).exp()
    }

    /// The quadrature rule as an equal-weight finite mixture.
    pub fn as_mixture(&self) -> Result<GaussianMixture> {
        let nodes: Vec<f64> = self.quadrature_nodes().collect();
        let mut centers = DMatrix::zeros(2, nodes.len());
        for (j, z) in nodes.iter().enumerate() {
            centers.column_mut(j).copy_from_slice(&spiral_mean(*z));
        }
        let cov = SpdMatrix::new(DMatrix::identity(2, 2) * self.sigma2)?;
        GaussianMixture::uniform(&Ensemble::new(centers)?, vec![cov; nodes.len()])
    }

    /// Exact mean and covariance of the continuous mixture, in terms of the
    /// Fresnel integrals at `2 sqrt 2`.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (s, c) = fresnel(2.0 * SQRT_2);
        let mean = Vector2::new(-s, c - 2.0 * SQRT_2) * (3.0 / (8.0 * (2.0 * PI).sqrt()));
        let k = 9.0 / (128.0 * PI);
        let s11 = 9.0 * PI / 4.0 - k * s * s + self.sigma2;
        let s21 = -k * ((2.0 * SQRT_2 - c) * s + 8.0 * PI);
        let s22 = k * (4.0 * SQRT_2 * c - c * c - 8.0 + 32.0 * PI * PI) + self.sigma2;
        let cov = Matrix2::new(s11, s21, s21, s22);
        (DVector::from_column_slice(mean.as_slice()), DMatrix::from_column_slice(2, 2, cov.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numstat::{sample_covariance, stream_rng};
    use approx::assert_relative_eq;

    #[test]
    fn curve_examples() {
        assert_eq!(spiral_mean(0.0), [0.0, 0.0]);
        let m = spiral_mean(PI);
        assert_relative_eq!(m[0], -1.5 * PI.sqrt(), epsilon = 1e-14);
        assert!(m[1].abs() < 1e-14);
        let m = spiral_mean(4.0 * PI);
        assert_relative_eq!(m[0], 3.0 * PI.sqrt(), epsilon = 1e-14);
        assert!(m[1].abs() < 1e-14);
    }

    #[test]
    fn closed_form_moments() {
        let (mean, cov) = SpiralDistribution::default().moments();
        assert_relative_eq!(mean[0], -0.058041462992882, epsilon = 1e-10);
        assert_relative_eq!(mean[1], -0.348995817947008, epsilon = 1e-10);
        assert_relative_eq!(cov[(0, 0)], 7.069120909150681, epsilon = 1e-10);
        assert_relative_eq!(cov[(1, 0)], -0.5827562278520418, epsilon = 1e-10);
        assert_relative_eq!(cov[(0, 1)], cov[(1, 0)]);
        assert_relative_eq!(cov[(1, 1)], 6.950691639632534, epsilon = 1e-10);
    }

    #[test]
    fn moments_match_quadrature_mixture() {
        let d = SpiralDistribution::default();
        let (mean, cov) = d.moments();
        let (qm, qc) = d.as_mixture().unwrap().moments();
        assert!((mean - qm).amax() < 1e-6);
        assert!((cov - qc).amax() < 1e-6);
    }

    #[test]
    fn samples_match_moments() {
        let d = SpiralDistribution::default();
        let x = d.sample(100_000, &mut stream_rng(2, 0)).unwrap();
        let (mean, cov) = d.moments();
        let emp = x.mean();
        for i in 0..2 {
            let se = (cov[(i, i)] / x.len() as f64).sqrt();
            assert!((emp[i] - mean[i]).abs() < 3.0 * se, "coordinate {i}");
        }
        let ecov = sample_covariance(&x).unwrap();
        assert!((ecov - cov).amax() < 0.1);
    }

    #[test]
    fn noiseless_sample_lies_on_curve() {
        let d = SpiralDistribution { sigma2: 1e-300, ..Default::default() };
        let mut rng = stream_rng(4, 0);
        for _ in 0..50 {
            let p = d.sample_point(&mut rng);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let z = (r / SPIRAL_SCALE).powi(2);
            let m = spiral_mean(z);
            assert!((m[0] - p[0]).abs() < 1e-9 && (m[1] - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = SpiralDistribution::default();
        assert_eq!(d.sample(10, &mut stream_rng(5, 1)).unwrap(), d.sample(10, &mut stream_rng(5, 1)).unwrap());
    }

    #[test]
    fn density_integrates_to_one() {
        let grid = crate::metrics::EvalGrid::default();
        let values = grid.mixture_density(&SpiralDistribution::default().as_mixture().unwrap()).unwrap();
        let total: f64 = values.iter().sum::<f64>() * grid.cell_volume();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn far_point_has_finite_log_density() {
        let d = SpiralDistribution::default();
        let lp = d.log_pdf(&[50.0, 50.0]);
        assert!(lp.is_finite());
        assert!(d.pdf(&[50.0, 50.0]) < 1e-300);
    }

    #[test]
    fn density_peaks_on_curve() {
        let d = SpiralDistribution::default();
        let z = 1.5 * PI;
        let on = spiral_mean(z);
        // Normal to the tangent (1.5/(2 sqrt z))(cos z, sin z) + 1.5 sqrt z (-sin z, cos z).
        let t = [0.5 / z.sqrt() * z.cos() - z.sqrt() * z.sin(), 0.5 / z.sqrt() * z.sin() + z.sqrt() * z.cos()];
        let tn = (t[0] * t[0] + t[1] * t[1]).sqrt();
        let off = 10.0 * d.sigma2.sqrt();
        let displaced = [on[0] - off * t[1] / tn, on[1] + off * t[0] / tn];
        assert!(d.pdf(&on) >= d.pdf(&displaced));
    }

    #[test]
    fn quadrature_has_converged() {
        let coarse = SpiralDistribution::default();
        let fine = SpiralDistribution { quadrature_points: 20_000, ..Default::default() };
        let mut rng = stream_rng(8, 0);
        for _ in 0..100 {
            let p = coarse.sample_point(&mut rng);
            assert!((coarse.pdf(&p) - fine.pdf(&p)).abs() < 1e-8);
        }
    }

    #[test]
    fn validation() {
        assert!(SpiralDistribution::new(0.0, 10).is_err());
        assert!(SpiralDistribution::new(1.0, 1).is_err());
    }
}
