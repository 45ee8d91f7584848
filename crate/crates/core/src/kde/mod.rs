//! Kernel density estimates of an ensemble as Gaussian mixtures.
//!
//! Three estimators share the same output type, one component per particle
//! with uniform weights:
//!
//! * [`build_ckde`]: every kernel is the bandwidth-scaled global sample
//!   covariance.
//! * [`build_akde`]: the same kernel rescaled per particle by a pilot-density
//!   ratio.
//! * [`build_elkde`]: every kernel is the bandwidth-scaled local covariance
//!   recovered from a distance-weighted conditional covariance around the
//!   particle (see [`localize`]).

mod localize;
mod mixture;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numstat::{sample_covariance, spd_floor, Ensemble, SpdMatrix};

pub use localize::{
    build_elkde, default_neighbor_index, local_covariance, local_radius, local_weights, localized_covariance,
    radius_floor, ElkdeOptions, Projection,
};
pub use mixture::{gmm_logpdf, gmm_moments, gmm_sample, GaussianMixture};

/// `(4 / (N (n + 2)))^(2 / (n + 4))`, the Gaussian-optimal bandwidth factor.
pub fn silverman_bandwidth(dim: usize, count: usize) -> f64 {
    assert!(dim >= 1 && count >= 1, "silverman bandwidth needs n >= 1 and N >= 1");
    let n = dim as f64;
    (4.0 / (count as f64 * (n + 2.0))).powf(2.0 / (n + 4.0))
}

/// Constant multiplier `s_beta` applied to the Silverman bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthSpec {
    pub s_beta: f64,
}

impl Default for BandwidthSpec {
    fn default() -> Self {
        Self { s_beta: 1.0 }
    }
}

impl BandwidthSpec {
    pub fn new(s_beta: f64) -> Result<Self> {
        if !(s_beta > 0.0) || !s_beta.is_finite() {
            return Err(Error::InvalidParameter(format!("bandwidth scale must be positive, got {s_beta}")));
        }
        Ok(Self { s_beta })
    }

    /// `s_beta * beta_N^2`.
    pub fn factor(&self, dim: usize, count: usize) -> f64 {
        self.s_beta * silverman_bandwidth(dim, count)
    }
}

/// Sensitivity exponent of the adaptive estimator; `None` means `1 / n`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AkdeOptions {
    pub alpha_exp: Option<f64>,
}

impl AkdeOptions {
    pub fn exponent(&self, dim: usize) -> f64 {
        self.alpha_exp.unwrap_or(1.0 / dim as f64)
    }
}

/// Selects one of the three density estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum KdeMethod {
    Ckde,
    Akde(AkdeOptions),
    Elkde(ElkdeOptions),
}

impl KdeMethod {
    pub fn build(&self, x: &Ensemble, bw: BandwidthSpec) -> Result<GaussianMixture> {
        match self {
            KdeMethod::Ckde => build_ckde(x, bw),
            KdeMethod::Akde(opts) => build_akde(x, bw, *opts),
            KdeMethod::Elkde(opts) => build_elkde(x, bw, opts),
        }
    }
}

/// The shared CKDE kernel covariance `s_beta beta_N^2 Cov(X)`, floored at
/// `1e-12 trace / n` when it is rank deficient.
fn ckde_kernel(x: &Ensemble, bw: BandwidthSpec) -> Result<SpdMatrix> {
    let cov = sample_covariance(x)?;
    let n = x.dim();
    if cov.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateEnsemble("all particles are identical".into()));
    }
    let kernel: DMatrix<f64> = cov * bw.factor(n, x.len());
    match SpdMatrix::from_symmetrized(kernel.clone()) {
        Ok(spd) => Ok(spd),
        Err(_) => {
            let eps = 1e-12 * kernel.trace() / n as f64;
            spd_floor(&kernel, eps)
        }
    }
}

pub fn build_ckde(x: &Ensemble, bw: BandwidthSpec) -> Result<GaussianMixture> {
    let kernel = ckde_kernel(x, bw)?;
    GaussianMixture::uniform(x, vec![kernel; x.len()])
}

/// Log pilot (CKDE) density at every particle.
///
/// All pilot kernels share one covariance, so particles are whitened once by
/// its Cholesky factor and the pairwise Mahalanobis distances become plain
/// squared distances.
fn pilot_log_densities(x: &Ensemble, kernel: &SpdMatrix) -> Vec<f64> {
    let n = x.dim();
    let count = x.len();
    let white = kernel
        .lower()
        .solve_lower_triangular(x.states())
        .expect("Cholesky factor has a nonzero diagonal");
    let w = white.as_slice();
    let norm = -(count as f64).ln() - 0.5 * (kernel.log_det() + n as f64 * crate::numstat::LN_2PI);
    // Every particle sees itself at distance zero, so each sum is at least
    // one and needs no log-sum-exp shift. Pairs are visited once.
    let mut sums = vec![1.0; count];
    for i in 0..count {
        let xi = &w[i * n..(i + 1) * n];
        for j in (i + 1)..count {
            let xj = &w[j * n..(j + 1) * n];
            let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            let t = (-0.5 * d2).exp();
            sums[i] += t;
            sums[j] += t;
        }
    }
    sums.into_iter().map(|s| norm + s.ln()).collect()
}

/// Adaptive KDE: the CKDE kernel rescaled by `lambda_i^2` with
/// `lambda_i = (p(x_i) / g)^(-alpha)` and `log g` the mean log pilot density.
pub fn build_akde(x: &Ensemble, bw: BandwidthSpec, opts: AkdeOptions) -> Result<GaussianMixture> {
    let alpha = opts.exponent(x.dim());
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("AKDE exponent must be nonnegative, got {alpha}")));
    }
    let kernel = ckde_kernel(x, bw)?;
    let log_pilot = pilot_log_densities(x, &kernel);
    if let Some(i) = log_pilot.iter().position(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::ZeroPilotDensity(i));
    }
    let log_g = log_pilot.iter().sum::<f64>() / log_pilot.len() as f64;
    let covariances = log_pilot
        .iter()
        .map(|l| {
            let lambda = (-alpha * (l - log_g)).exp();
            if lambda == 1.0 {
                Ok(kernel.clone())
            } else {
                SpdMatrix::from_symmetrized(kernel.matrix() * (lambda * lambda))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::uniform(x, covariances)
}
