//! Benchmark systems: Lorenz '63 with a range observation, the Fermat
//! spiral density and a bimodal two-component Gaussian mixture.

pub mod fresnel;
mod gm2;
mod lorenz63;
mod spiral;

pub use gm2::Gm2Distribution;
pub use lorenz63::{
    attractor_point, lorenz63_rhs, propagate, propagate_ensemble, range_observation, simulate_truth,
    Lorenz63Config, RangeObservation, Trajectory, TRUTH_BURN_IN,
};
pub use spiral::{spiral_mean, SpiralDistribution, SPIRAL_Z_MAX};
