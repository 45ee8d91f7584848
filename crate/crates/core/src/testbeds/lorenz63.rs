use nalgebra::{dmatrix, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engmf::{ObservationModel, ObservationOperator};
use crate::error::{Error, Result};
use crate::numstat::{Ensemble, SpdMatrix};

const SIGMA: f64 = 10.0;
const RHO: f64 = 28.0;
const BETA: f64 = 8.0 / 3.0;

/// Time integrated from a random start before a trajectory is used as truth.
pub const TRUTH_BURN_IN: f64 = 50.0;

/// Lorenz '63 filtering setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz63Config {
    /// Model time between observations.
    pub dt_assim: f64,
    /// Fixed RK4 step; must divide `dt_assim`.
    pub substep: f64,
    /// Center of the range observation.
    pub c2: [f64; 3],
    /// Range observation noise variance.
    pub r_obs: f64,
    /// Assimilation steps per run.
    pub steps: usize,
    /// Leading steps excluded from error statistics.
    pub spinup: usize,
}

impl Default for Lorenz63Config {
    fn default() -> Self {
        let w = 6.0 * std::f64::consts::SQRT_2;
        Self { dt_assim: 0.5, substep: 0.05, c2: [w, w, 27.0], r_obs: 1.0, steps: 5500, spinup: 500 }
    }
}

impl Lorenz63Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_assim > 0.0) {
            return Err(Error::InvalidParameter(format!("dt_assim must be positive, got {}", self.dt_assim)));
        }
        substep_count(self.dt_assim, self.substep)?;
        if !(self.r_obs > 0.0) || !self.r_obs.is_finite() {
            return Err(Error::InvalidParameter(format!("r_obs must be positive, got {}", self.r_obs)));
        }
        if self.spinup >= self.steps {
            return Err(Error::InvalidParameter(format!(
                "spinup ({}) must be shorter than the run ({} steps)",
                self.spinup, self.steps
            )));
        }
        Ok(())
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        range_observation(self.c2, self.r_obs)
    }
}

pub fn lorenz63_rhs(x: &[f64; 3]) -> [f64; 3] {
    [SIGMA * (x[1] - x[0]), x[0] * (RHO - x[2]) - x[1], x[0] * x[1] - BETA * x[2]]
}

fn substep_count(duration: f64, substep: f64) -> Result<usize> {
    if !(duration >= 0.0) || !(substep > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need duration >= 0 and substep > 0, got {duration} and {substep}"
        )));
    }
    let ratio = duration / substep;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidParameter(format!("substep {substep} does not divide duration {duration}")));
    }
    Ok(steps as usize)
}

fn rk4_step(x: &[f64; 3], h: f64) -> [f64; 3] {
    let add = |a: &[f64; 3], k: &[f64; 3], s: f64| [a[0] + s * k[0], a[1] + s * k[1], a[2] + s * k[2]];
    let k1 = lorenz63_rhs(x);
    let k2 = lorenz63_rhs(&add(x, &k1, 0.5 * h));
    let k3 = lorenz63_rhs(&add(x, &k2, 0.5 * h));
    let k4 = lorenz63_rhs(&add(x, &k3, h));
    std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Largest `h * ||J||_inf` for which an RK4 step is taken as is.
const RK4_STABLE_SPAN: f64 = 2.5;

/// Row-sum bound on the spectral radius of the Lorenz '63 Jacobian at `x`.
fn jacobian_bound(x: &[f64; 3]) -> f64 {
    let rows = [2.0 * SIGMA, (RHO - x[2]).abs() + 1.0 + x[0].abs(), x[1].abs() + x[0].abs() + BETA];
    rows.into_iter().fold(0.0, f64::max)
}

/// One substep of length `h`, split into equal RK4 steps when `x` is far
/// enough off the attractor that a single step would be unstable. On the
/// attractor this is a plain RK4 step.
fn stable_step(x: &[f64; 3], h: f64) -> [f64; 3] {
    let span = h * jacobian_bound(x);
    if !(span > RK4_STABLE_SPAN) {
        return rk4_step(x, h);
    }
    let pieces = (span / RK4_STABLE_SPAN).ceil().min(1e6) as usize;
    let dh = h / pieces as f64;
    let mut y = *x;
    for _ in 0..pieces {
        y = rk4_step(&y, dh);
    }
    y
}

/// Integrates the Lorenz '63 system for `duration` with RK4 substeps of
/// `substep`, refined where the state is far off the attractor.
pub fn propagate(x0: &[f64; 3], duration: f64, substep: f64) -> Result<[f64; 3]> {
    let steps = substep_count(duration, substep)?;
    let mut x = *x0;
    for _ in 0..steps {
        x = stable_step(&x, substep);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("Lorenz '63 state left the finite range from {x0:?}")));
        }
    }
    Ok(x)
}

/// Propagates every particle of a 3-D ensemble.
pub fn propagate_ensemble(x: &Ensemble, duration: f64, substep: f64) -> Result<Ensemble> {
    if x.dim() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: x.dim() });
    }
    let mut out = DMatrix::zeros(3, x.len());
    for (j, p) in x.particles().enumerate() {
        let next = propagate(&[p[0], p[1], p[2]], duration, substep)?;
        out.column_mut(j).copy_from_slice(&next);
    }
    Ensemble::new(out)
}

/// A point on the attractor: a standard normal start integrated for
/// [`TRUTH_BURN_IN`] time units.
pub fn attractor_point<R: Rng + ?Sized>(substep: f64, rng: &mut R) -> Result<[f64; 3]> {
    let start: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    propagate(&start, TRUTH_BURN_IN, substep)
}

/// Truth trajectory at every assimilation time and the noisy range
/// observations of it. Index 0 is the initial state, which is not observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<[f64; 3]>,
    pub observations: Vec<f64>,
}

pub fn simulate_truth<R: Rng + ?Sized>(cfg: &Lorenz63Config, rng: &mut R) -> Result<Trajectory> {
    cfg.validate()?;
    let obs = RangeObservation::new(cfg.c2);
    let sd = cfg.r_obs.sqrt();
    let mut x = attractor_point(cfg.substep, rng)?;
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut observations = Vec::with_capacity(cfg.steps);
    states.push(x);
    for _ in 0..cfg.steps {
        x = propagate(&x, cfg.dt_assim, cfg.substep)?;
        let noise: f64 = StandardNormal.sample(rng);
        states.push(x);
        observations.push(obs.range(&x) + sd * noise);
    }
    Ok(Trajectory { states, observations })
}

/// `h(x) = ||x - c||`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeObservation {
    center: [f64; 3],
}

/// Distances below this are treated as sitting on the center.
const RANGE_FLOOR: f64 = 1e-8;

impl RangeObservation {
    pub fn new(center: [f64; 3]) -> Self {
        Self { center }
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn range(&self, x: &[f64]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|i| x[i] - self.center[i]);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

impl ObservationOperator for RangeObservation {
    fn state_dim(&self) -> usize {
        3
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn apply(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_element(1, self.range(x))
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let r = self.range(x);
        if r < RANGE_FLOOR {
            // The gradient of a norm is undefined at its center; evaluate it
            // at a point nudged off the center along the first axis.
            log::warn!("range Jacobian requested at the observation center; perturbing by {RANGE_FLOOR:e}");
            return dmatrix![1.0, 0.0, 0.0];
        }
        DMatrix::from_fn(1, 3, |_, i| (x[i] - self.center[i]) / r)
    }
}

/// Range observation about `c2` with noise variance `r_obs`.
pub fn range_observation(c2: [f64; 3], r_obs: f64) -> Result<ObservationModel> {
    ObservationModel::new(std::sync::Arc::new(RangeObservation::new(c2)), SpdMatrix::new(dmatrix![r_obs])?)
}
