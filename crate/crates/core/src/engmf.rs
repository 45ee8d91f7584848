//! Bayesian update engine: the component-wise EnGMF mixture update, the
//! three-stage filter step (density estimate, update, resample) and a
//! bootstrap SIR particle filter used as an accuracy reference.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kde::{AkdeOptions, BandwidthSpec, ElkdeOptions, GaussianMixture, KdeMethod};
use crate::numstat::{
    sample_covariance, spd_floor, standard_normal_vector, stream_rng, symmetrize, Ensemble, SpdMatrix, WeightVector,
};

/// Eigenvalue floor applied to every posterior component covariance.
const POSTERIOR_COV_FLOOR: f64 = 1e-12;

/// Relative mismatch tolerated between an analytic Jacobian and central
/// finite differences.
const JACOBIAN_REL_TOL: f64 = 1e-5;

/// A (possibly nonlinear) observation operator with an analytic Jacobian.
pub trait ObservationOperator: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> DVector<f64>;
    /// `obs_dim x state_dim` derivative of [`apply`](Self::apply) at `x`.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;
}

/// `h(x) = H x`.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    pub matrix: DMatrix<f64>,
}

impl ObservationOperator for LinearObservation {
    fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64]) -> DVector<f64> {
        &self.matrix * DVector::from_column_slice(x)
    }

    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// Observation operator plus additive Gaussian noise covariance `R`.
#[derive(Clone)]
pub struct ObservationModel {
    operator: Arc<dyn ObservationOperator>,
    noise: SpdMatrix,
}

impl fmt::Debug for ObservationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservationModel")
            .field("state_dim", &self.operator.state_dim())
            .field("obs_dim", &self.operator.obs_dim())
            .field("noise", self.noise.matrix())
            .finish()
    }
}

impl ObservationModel {
    /// Checks dimensions and validates the Jacobian against central finite
    /// differences at a fixed set of probe points.
    pub fn new(operator: Arc<dyn ObservationOperator>, noise: SpdMatrix) -> Result<Self> {
        if noise.dim() != operator.obs_dim() {
            return Err(Error::DimensionMismatch { expected: operator.obs_dim(), got: noise.dim() });
        }
        let model = Self { operator, noise };
        let mut rng = stream_rng(0x6a61_636f_6269_616e, 0);
        let n = model.state_dim();
        let probes: Vec<DVector<f64>> = (0..8).map(|_| standard_normal_vector(n, &mut rng) * 10.0).collect();
        model.check_jacobian(&probes, JACOBIAN_REL_TOL)?;
        Ok(model)
    }

    pub fn linear(matrix: DMatrix<f64>, noise: SpdMatrix) -> Result<Self> {
        Self::new(Arc::new(LinearObservation { matrix }), noise)
    }

    pub fn state_dim(&self) -> usize {
        self.operator.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.operator.obs_dim()
    }

    pub fn noise(&self) -> &SpdMatrix {
        &self.noise
    }

    pub fn apply(&self, x: &[f64]) -> DVector<f64> {
        self.operator.apply(x)
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.operator.jacobian(x)
    }

    /// Compares the analytic Jacobian with central differences at `points`.
    pub fn check_jacobian(&self, points: &[DVector<f64>], rel_tol: f64) -> Result<()> {
        for p in points {
            let analytic = self.jacobian(p.as_slice());
            let numeric = central_difference_jacobian(self.operator.as_ref(), p.as_slice());
            let err = (&analytic - &numeric).norm() / analytic.norm().max(1.0);
            if !(err < rel_tol) {
                return Err(Error::InvalidParameter(format!(
                    "Jacobian disagrees with finite differences (relative error {err:e})"
                )));
            }
        }
        Ok(())
    }

    /// `log N(y; h(x), R)`.
    pub fn log_likelihood(&self, x: &[f64], y: &DVector<f64>) -> f64 {
        let hx = self.apply(x);
        self.noise.log_density(y.as_slice(), hx.as_slice())
    }
}

pub fn central_difference_jacobian(op: &dyn ObservationOperator, x: &[f64]) -> DMatrix<f64> {
    let n = op.state_dim();
    let mut out = DMatrix::zeros(op.obs_dim(), n);
    let mut probe = x.to_vec();
    for k in 0..n {
        let h = 1e-6 * x[k].abs().max(1.0);
        probe[k] = x[k] + h;
        let plus = op.apply(&probe);
        probe[k] = x[k] - h;
        let minus = op.apply(&probe);
        probe[k] = x[k];
        out.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    out
}

/// Form of the component covariance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceUpdate {
    /// `(I - G H) Sigma`, symmetrized.
    #[default]
    Short,
    /// `(I - G H) Sigma (I - G H)' + G R G'`.
    Joseph,
}

/// Component-wise EnGMF update with the short-form covariance update.
pub fn engmf_update(prior: &GaussianMixture, obs: &ObservationModel, y: &DVector<f64>) -> Result<GaussianMixture> {
    engmf_update_with(prior, obs, y, CovarianceUpdate::Short)
}

/// Linearizes `h` about every prior mean, applies a Kalman update per
/// component and reweights components by their innovation likelihood.
pub fn engmf_update_with(
    prior: &GaussianMixture,
    obs: &ObservationModel,
    y: &DVector<f64>,
    form: CovarianceUpdate,
) -> Result<GaussianMixture> {
    let n = prior.dim();
    if obs.state_dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: obs.state_dim() });
    }
    if y.len() != obs.obs_dim() {
        return Err(Error::DimensionMismatch { expected: obs.obs_dim(), got: y.len() });
    }
    let count = prior.len();
    let r = obs.noise().matrix();
    let mut means = DMatrix::zeros(n, count);
    let mut covariances = Vec::with_capacity(count);
    let mut log_weights = Vec::with_capacity(count);
    for j in 0..count {
        let xj = prior.mean(j);
        let sigma = prior.covariance(j).matrix();
        let h = obs.jacobian(xj);
        let hx = obs.apply(xj);
        let pht = sigma * h.transpose();
        let innovation_cov = SpdMatrix::from_symmetrized(&h * &pht + r)?;
        // G = P H' S^{-1}, solved as (S^{-1} H P)'.
        let gain = innovation_cov.solve(&pht.transpose()).transpose();
        let innovation = y - &hx;
        let mean = DVector::from_column_slice(xj) + &gain * &innovation;
        let mut cov = match form {
            CovarianceUpdate::Short => sigma - &gain * &pht.transpose(),
            CovarianceUpdate::Joseph => {
                let a = DMatrix::identity(n, n) - &gain * &h;
                &a * sigma * a.transpose() + &gain * r * gain.transpose()
            }
        };
        symmetrize(&mut cov);
        covariances.push(spd_floor(&cov, POSTERIOR_COV_FLOOR)?);
        means.set_column(j, &mean);
        log_weights.push(prior.log_weights()[j] + innovation_cov.log_density(y.as_slice(), hx.as_slice()));
    }
    GaussianMixture::from_log_weights(&log_weights, means, covariances)
}

/// Filtering algorithm selector.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterMethod {
    EnGmf { bandwidth: BandwidthSpec },
    AEnGmf { bandwidth: BandwidthSpec, akde: AkdeOptions },
    ElEnGmf { bandwidth: BandwidthSpec, elkde: ElkdeOptions },
    /// Bootstrap particle filter with rejuvenation scale `tau`.
    Sir { tau: f64 },
}

impl FilterMethod {
    /// Column label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            FilterMethod::EnGmf { .. } => "EnGMF",
            FilterMethod::AEnGmf { .. } => "AEnGMF",
            FilterMethod::ElEnGmf { .. } => "ELEnGMF",
            FilterMethod::Sir { .. } => "SIR",
        }
    }

    /// The prior density estimator of a mixture filter.
    pub fn kde(&self) -> Option<(KdeMethod, BandwidthSpec)> {
        match self {
            FilterMethod::EnGmf { bandwidth } => Some((KdeMethod::Ckde, *bandwidth)),
            FilterMethod::AEnGmf { bandwidth, akde } => Some((KdeMethod::Akde(*akde), *bandwidth)),
            FilterMethod::ElEnGmf { bandwidth, elkde } => Some((KdeMethod::Elkde(elkde.clone()), *bandwidth)),
            FilterMethod::Sir { .. } => None,
        }
    }
}

/// Result of one mixture-filter assimilation step.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub ensemble: Ensemble,
    pub posterior: GaussianMixture,
}

/// One EnGMF-family step: density estimate of the prior ensemble, mixture
/// update, then resampling of `N` exchangeable posterior particles.
pub fn filter_step<R: Rng + ?Sized>(
    x_prior: &Ensemble,
    method: &FilterMethod,
    obs: &ObservationModel,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<FilterOutput> {
    let (kde, bw) = method
        .kde()
        .ok_or_else(|| Error::InvalidParameter("filter_step needs a mixture filter; use sir_step for SIR".into()))?;
    let prior = kde.build(x_prior, bw)?;
    update_and_resample(&prior, x_prior.len(), obs, y, rng)
}

/// Update and resampling stages of [`filter_step`] for an already built prior.
pub fn update_and_resample<R: Rng + ?Sized>(
    prior: &GaussianMixture,
    count: usize,
    obs: &ObservationModel,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<FilterOutput> {
    let posterior = engmf_update(prior, obs, y)?;
    let ensemble = posterior.sample(count, rng)?;
    Ok(FilterOutput { ensemble, posterior })
}

/// Result of one SIR step.
#[derive(Debug, Clone)]
pub struct SirOutput {
    pub ensemble: Ensemble,
    /// Importance-weighted mean before resampling.
    pub mean: DVector<f64>,
    /// Importance-weighted second central moment before resampling.
    pub covariance: DMatrix<f64>,
}

/// Bootstrap particle filter step: likelihood weights, systematic
/// resampling, then Gaussian jitter with covariance
/// `tau^2 beta_N^2 Cov(X_prior)`.
pub fn sir_step<R: Rng + ?Sized>(
    x_prior: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    tau: f64,
    rng: &mut R,
) -> Result<SirOutput> {
    let count = x_prior.len();
    if count < 2 {
        return Err(Error::InsufficientSamples { required: 2, got: count });
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("rejuvenation scale must be nonnegative, got {tau}")));
    }
    let log_w: Vec<f64> = x_prior.particles().map(|x| obs.log_likelihood(x, y)).collect();
    if log_w.iter().all(|a| *a == f64::NEG_INFINITY) {
        return Err(Error::Divergence("every particle has zero likelihood".into()));
    }
    let weights = WeightVector::from_log_weights(&log_w)?;
    let (mean, covariance) = weighted_moments(x_prior, weights.as_slice());

    let indices = systematic_resample(weights.as_slice(), count, rng);
    let n = x_prior.dim();
    let mut out = DMatrix::zeros(n, count);
    for (col, &j) in indices.iter().enumerate() {
        out.set_column(col, &DVector::from_column_slice(x_prior.particle(j)));
    }
    if tau > 0.0 {
        if let Some(jitter) = rejuvenation_covariance(x_prior, tau)? {
            for col in 0..count {
                let z = standard_normal_vector(n, rng);
                let dz = jitter.lower() * z;
                for i in 0..n {
                    out[(i, col)] += dz[i];
                }
            }
        }
    }
    Ok(SirOutput { ensemble: Ensemble::new(out)?, mean, covariance })
}

/// `tau^2 beta_N^2 Cov(X)`, or `None` when the ensemble has no spread.
fn rejuvenation_covariance(x: &Ensemble, tau: f64) -> Result<Option<SpdMatrix>> {
    let cov = sample_covariance(x)?;
    let n = x.dim();
    let scaled = cov * (tau * tau * crate::kde::silverman_bandwidth(n, x.len()));
    let trace = scaled.trace();
    if !(trace > 0.0) {
        return Ok(None);
    }
    match SpdMatrix::from_symmetrized(scaled.clone()) {
        Ok(spd) => Ok(Some(spd)),
        Err(_) => Ok(Some(spd_floor(&scaled, 1e-12 * trace / n as f64)?)),
    }
}

fn weighted_moments(x: &Ensemble, w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.dim();
    let mut mean = DVector::zeros(n);
    for (p, wj) in x.particles().zip(w) {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += wj * v;
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    for (p, wj) in x.particles().zip(w) {
        if *wj == 0.0 {
            continue;
        }
        for c in 0..n {
            let dc = p[c] - mean[c];
            for r in 0..n {
                cov[(r, c)] += wj * (p[r] - mean[r]) * dc;
            }
        }
    }
    symmetrize(&mut cov);
    (mean, cov)
}

/// Systematic resampling: one uniform offset, `count` evenly spaced
/// pointers into the cumulative weights.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let step = total / count as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(count);
    let mut cumulative = weights[0];
    let mut j = 0;
    for _ in 0..count {
        while u > cumulative && j + 1 < weights.len() {
            j += 1;
            cumulative += weights[j];
        }
        out.push(j);
        u += step;
    }
    out
}
