//! Ensemble-localized kernel covariances.
//!
//! Around particle `x_i` a synthetic Gaussian observation with covariance
//! `S_i = r_i^2 I` reweights the ensemble; the weighted (conditional)
//! covariance `C_i` is then mapped back to the covariance of the distribution
//! whose local behaviour it describes,
//!
//! ```text
//! Sigma_i = Pi( C_i (S_i - C_i)^{-1} S_i )
//! ```
//!
//! which is exact for Gaussian data whatever `S_i` is. `Pi` projects onto the
//! SPD cone by eigenvalue flooring, either of the final product only
//! ([`Projection::Naive`]) or of `S_i - C_i` as well
//! ([`Projection::Constituent`]).

use nalgebra::DMatrix;

use super::{BandwidthSpec, GaussianMixture};
use crate::error::{Error, Result};
use crate::numstat::{
    spd_floor, symmetrize, weighted_covariance_raw, Ensemble, SpdMatrix, WeightVector, DEGENERATE_WEIGHT_TOL,
};

/// Eigenvalue projection applied to the localized covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Floor the eigenvalues of `C (S - C)^{-1} S` at `eps1`.
    Naive { eps1: f64 },
    /// Floor `S - C` at `eps2` before inverting, then floor the product at
    /// `eps1`.
    Constituent { eps1: f64, eps2: f64 },
}

impl Projection {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Projection::Naive { eps1 } => eps1 > 0.0,
            Projection::Constituent { eps1, eps2 } => eps1 > 0.0 && eps2 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("projection floors must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElkdeOptions {
    /// Radius scale `s_r`.
    pub s_r: f64,
    /// Blend `alpha` of the local weights towards uniform.
    pub alpha_nudge: f64,
    pub projection: Projection,
    /// 1-based rank (self included) of the neighbour distance used as the
    /// radius; `None` means `round(sqrt(N))`.
    pub neighbor_index: Option<usize>,
}

impl Default for ElkdeOptions {
    fn default() -> Self {
        Self {
            s_r: 1.0,
            alpha_nudge: 1e-4,
            projection: Projection::Constituent { eps1: 1e-4, eps2: 1e-2 },
            neighbor_index: None,
        }
    }
}

impl ElkdeOptions {
    pub fn with_projection(projection: Projection) -> Self {
        Self { projection, ..Self::default() }
    }

    fn validate(&self, count: usize) -> Result<usize> {
        if !(self.s_r > 0.0) || !self.s_r.is_finite() {
            return Err(Error::InvalidParameter(format!("radius scale must be positive, got {}", self.s_r)));
        }
        if !(0.0..1.0).contains(&self.alpha_nudge) {
            return Err(Error::InvalidParameter(format!("weight nudge must lie in [0, 1), got {}", self.alpha_nudge)));
        }
        self.projection.validate()?;
        let k = self.neighbor_index.unwrap_or_else(|| default_neighbor_index(count));
        if k == 0 || k > count {
            return Err(Error::InvalidParameter(format!("neighbor index {k} outside 1..={count}")));
        }
        Ok(k)
    }
}

/// `sqrt(N)` rounded half up.
pub fn default_neighbor_index(count: usize) -> usize {
    ((count as f64).sqrt() + 0.5).floor() as usize
}

/// Smallest admissible radius, `1e-8 (1 + mean particle norm)`.
pub fn radius_floor(x: &Ensemble) -> f64 {
    let mean_norm = x.particles().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / x.len() as f64;
    1e-8 * (1.0 + mean_norm)
}

fn squared_distances(x: &Ensemble, i: usize, out: &mut [f64]) {
    let xi = x.particle(i);
    for (d, xj) in out.iter_mut().zip(x.particles()) {
        *d = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
    }
}

/// `k`-th smallest (1-based) of `values`; reorders `scratch`.
fn kth_smallest(values: &[f64], k: usize, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(values);
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    *kth
}

/// Localization radius of particle `i`: `s_r` times the distance to its
/// `neighbor_index`-th nearest particle (itself counted first at distance 0),
/// never below [`radius_floor`].
pub fn local_radius(x: &Ensemble, i: usize, opts: &ElkdeOptions) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::InsufficientSamples { required: 2, got: x.len() });
    }
    let k = opts.validate(x.len())?;
    let mut d2 = vec![0.0; x.len()];
    squared_distances(x, i, &mut d2);
    let mut scratch = Vec::with_capacity(x.len());
    Ok(radius_from_sorted(kth_smallest(&d2, k, &mut scratch), opts.s_r, radius_floor(x)))
}

fn radius_from_sorted(kth_d2: f64, s_r: f64, floor: f64) -> f64 {
    (s_r * kth_d2.sqrt()).max(floor)
}

/// Local weights `w_j ∝ N(x_j; x_i, S_i)` normalized in the log domain, then
/// nudged towards uniform by `alpha`.
pub fn local_weights(x: &Ensemble, i: usize, s_i: &SpdMatrix, alpha: f64) -> Result<WeightVector> {
    if s_i.dim() != x.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: s_i.dim() });
    }
    let xi = x.particle(i);
    let log_w: Vec<f64> = x.particles().map(|xj| s_i.log_density(xj, xi)).collect();
    Ok(WeightVector::from_log_weights(&log_w)?.nudged(alpha))
}

/// Isotropic special case of [`local_weights`] with `S_i = r^2 I`, from
/// precomputed squared distances. The self term has the largest log weight
/// (distance zero), so it is the log-sum-exp shift; terms more than 745
/// nats below it underflow to exactly zero and are skipped.
fn isotropic_weights(d2: &[f64], r2: f64, alpha: f64, out: &mut [f64]) {
    let inv = 0.5 / r2;
    let mut total = 0.0;
    for (w, &d) in out.iter_mut().zip(d2) {
        let a = d * inv;
        *w = if a > 745.0 { 0.0 } else { (-a).exp() };
        total += *w;
    }
    let floor = alpha / d2.len() as f64;
    for w in out.iter_mut() {
        *w = (1.0 - alpha) * (*w / total) + floor;
    }
}

/// Maps a conditional covariance `c` under localization covariance `s` to the
/// projected local covariance `Pi(c (s - c)^{-1} s)`.
pub fn localized_covariance(c: &DMatrix<f64>, s: &DMatrix<f64>, projection: Projection) -> Result<SpdMatrix> {
    projection.validate()?;
    if c.shape() != s.shape() || !c.is_square() {
        return Err(Error::DimensionMismatch { expected: s.nrows(), got: c.nrows() });
    }
    let gap = s - c;
    let (gap_inv_s, eps1) = match projection {
        Projection::Naive { eps1 } => {
            let solved = gap.clone().lu().solve(s);
            let solved = match solved {
                Some(m) if m.iter().all(|v| v.is_finite()) => m,
                // Exactly singular gap: nudge it off the singular set.
                _ => {
                    let tiny = f64::EPSILON * s.amax().max(f64::MIN_POSITIVE);
                    spd_floor(&gap, tiny)?.solve(s)
                }
            };
            (solved, eps1)
        }
        Projection::Constituent { eps1, eps2 } => (spd_floor(&gap, eps2)?.solve(s), eps1),
    };
    let mut sigma = c * gap_inv_s;
    symmetrize(&mut sigma);
    spd_floor(&sigma, eps1)
}

/// Unscaled local covariance of particle `i`.
pub fn local_covariance(x: &Ensemble, i: usize, opts: &ElkdeOptions) -> Result<SpdMatrix> {
    let mut scratch = LocalScratch::new(x.len());
    let k = opts.validate(x.len())?;
    if x.len() < 3 {
        return Err(Error::InsufficientSamples { required: 3, got: x.len() });
    }
    scratch.local_covariance(x, i, k, radius_floor(x), opts)
}

struct LocalScratch {
    d2: Vec<f64>,
    select: Vec<f64>,
    weights: Vec<f64>,
}

impl LocalScratch {
    fn new(count: usize) -> Self {
        Self { d2: vec![0.0; count], select: Vec::with_capacity(count), weights: vec![0.0; count] }
    }

    fn local_covariance(&mut self, x: &Ensemble, i: usize, k: usize, floor: f64, opts: &ElkdeOptions) -> Result<SpdMatrix> {
        squared_distances(x, i, &mut self.d2);
        let r = radius_from_sorted(kth_smallest(&self.d2, k, &mut self.select), opts.s_r, floor);
        let r2 = r * r;
        isotropic_weights(&self.d2, r2, opts.alpha_nudge, &mut self.weights);
        let c = weighted_covariance_raw(x, &self.weights, DEGENERATE_WEIGHT_TOL)?;
        let n = x.dim();
        localized_covariance(&c, &DMatrix::from_diagonal_element(n, n, r2), opts.projection)
    }
}

/// ELKDE mixture: uniform weights, one component per particle with
/// covariance `s_beta beta_N^2 Sigma_i`.
pub fn build_elkde(x: &Ensemble, bw: BandwidthSpec, opts: &ElkdeOptions) -> Result<GaussianMixture> {
    let count = x.len();
    if count < 3 {
        return Err(Error::InsufficientSamples { required: 3, got: count });
    }
    let k = opts.validate(count)?;
    let floor = radius_floor(x);
    let scale = bw.factor(x.dim(), count);
    let mut scratch = LocalScratch::new(count);
    let covariances = (0..count)
        .map(|i| {
            let local = scratch.local_covariance(x, i, k, floor, opts)?;
            SpdMatrix::from_symmetrized(local.into_matrix() * scale)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::uniform(x, covariances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numstat::{sample_covariance, stream_rng};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, DVector, SymmetricEigen};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn line(values: &[f64]) -> Ensemble {
        Ensemble::from_scalars(values).unwrap()
    }

    fn opts_k(k: usize, s_r: f64) -> ElkdeOptions {
        ElkdeOptions { s_r, neighbor_index: Some(k), ..ElkdeOptions::default() }
    }

    #[test]
    fn neighbor_index_rounding() {
        assert_eq!(default_neighbor_index(4), 2);
        assert_eq!(default_neighbor_index(3), 2);
        assert_eq!(default_neighbor_index(100), 10);
        assert_eq!(default_neighbor_index(2000), 45);
        // sqrt(6.25)=2.5 is not an integer count, but 42.25 -> 6.5 rounds up.
        assert_eq!(default_neighbor_index(42), 6);
    }

    #[test]
    fn radius_counts_self_first() {
        let x = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(local_radius(&x, 0, &opts_k(2, 1.0)).unwrap(), 1.0);
        assert_eq!(local_radius(&x, 0, &opts_k(2, 2.0)).unwrap(), 2.0);
        assert_eq!(local_radius(&x, 0, &opts_k(4, 1.0)).unwrap(), 3.0);
        assert_eq!(local_radius(&x, 1, &opts_k(3, 1.0)).unwrap(), 1.0);
    }

    #[test]
    fn duplicate_particles_use_radius_floor() {
        let x = line(&[2.0, 2.0, 2.0, 2.0]);
        let r = local_radius(&x, 0, &opts_k(2, 1.0)).unwrap();
        assert_eq!(r, 1e-8 * 3.0);
    }

    #[test]
    fn radius_rejects_bad_index() {
        let x = line(&[0.0, 1.0, 2.0]);
        assert!(local_radius(&x, 0, &opts_k(0, 1.0)).is_err());
        assert!(local_radius(&x, 0, &opts_k(4, 1.0)).is_err());
    }

    #[test]
    fn identical_pair_has_equal_weights() {
        let x = line(&[1.0, 1.0]);
        let s = SpdMatrix::identity(1);
        let w = local_weights(&x, 0, &s, 1e-4).unwrap();
        assert_relative_eq!(w.as_slice()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn nudge_blend() {
        let w = WeightVector::new(DVector::from_vec(vec![1.0, 0.0])).unwrap().nudged(1e-4);
        assert_relative_eq!(w.as_slice()[0], 0.99995, epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[1], 0.00005, epsilon = 1e-15);
    }

    #[test]
    fn isolated_particle_keeps_its_weight() {
        let x = line(&[0.0, 1e3, 1e3 + 1.0, 1e3 + 2.0]);
        let s = SpdMatrix::identity(1);
        let alpha = 1e-4;
        let w = local_weights(&x, 0, &s, alpha).unwrap();
        assert_relative_eq!(w.as_slice()[0], 1.0 - alpha * 3.0 / 4.0, epsilon = 1e-15);
        for j in 1..4 {
            assert_relative_eq!(w.as_slice()[j], alpha / 4.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn isotropic_fast_path_matches_general_weights() {
        let mut rng = stream_rng(3, 0);
        let data: Vec<f64> = (0..3 * 50).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Ensemble::new(DMatrix::from_vec(3, 50, data)).unwrap();
        let r2 = 0.7;
        let s = SpdMatrix::new(DMatrix::identity(3, 3) * r2).unwrap();
        for i in [0, 17, 49] {
            let general = local_weights(&x, i, &s, 1e-4).unwrap();
            let mut d2 = vec![0.0; 50];
            squared_distances(&x, i, &mut d2);
            let mut fast = vec![0.0; 50];
            isotropic_weights(&d2, r2, 1e-4, &mut fast);
            for (a, b) in general.as_slice().iter().zip(&fast) {
                assert!((a - b).abs() < 1e-14, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scalar_gaussian_identity() {
        let c = dmatrix![2.0 / 3.0];
        let s = dmatrix![1.0];
        for projection in [Projection::Naive { eps1: 1e-4 }, Projection::Constituent { eps1: 1e-4, eps2: 1e-2 }] {
            let sigma = localized_covariance(&c, &s, projection).unwrap();
            assert_relative_eq!(sigma.matrix()[(0, 0)], 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn constituent_projection_clamps_gap() {
        // C exceeds S in one direction: S - C = diag(-0.5, 0.5).
        let c = dmatrix![1.5, 0.0; 0.0, 0.5];
        let s = DMatrix::identity(2, 2);
        let sigma = localized_covariance(&c, &s, Projection::Constituent { eps1: 1e-4, eps2: 1e-2 }).unwrap();
        // diag(1.5 / 0.01, 0.5 / 0.5)
        assert_relative_eq!(*sigma.matrix(), dmatrix![150.0, 0.0; 0.0, 1.0], epsilon = 1e-10);
        let naive = localized_covariance(&c, &s, Projection::Naive { eps1: 1e-4 }).unwrap();
        assert_relative_eq!(*naive.matrix(), dmatrix![1e-4, 0.0; 0.0, 1.0], epsilon = 1e-12);
    }

    #[test]
    fn naive_projection_survives_singular_gap() {
        let c = DMatrix::identity(2, 2);
        let s = DMatrix::identity(2, 2);
        let sigma = localized_covariance(&c, &s, Projection::Naive { eps1: 1e-4 }).unwrap();
        assert!(sigma.log_det().is_finite());
    }

    #[test]
    fn collinear_triplet_is_floored() {
        let x = Ensemble::new(dmatrix![0.0, 1.0, 2.0; 0.0, 1.0, 2.0]).unwrap();
        for projection in [Projection::Naive { eps1: 1e-4 }, Projection::Constituent { eps1: 1e-4, eps2: 1e-2 }] {
            let g = build_elkde(&x, BandwidthSpec::default(), &ElkdeOptions::with_projection(projection)).unwrap();
            let beta2 = super::super::silverman_bandwidth(2, 3);
            for cov in g.covariances() {
                let eig = SymmetricEigen::new(cov.matrix().clone()).eigenvalues;
                assert!(eig.min() >= beta2 * 1e-4 * (1.0 - 1e-9), "{eig}");
            }
        }
    }

    #[test]
    fn elkde_needs_three_particles() {
        let x = line(&[0.0, 1.0]);
        assert!(matches!(
            build_elkde(&x, BandwidthSpec::default(), &ElkdeOptions::default()),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn elkde_scale_equivariance() {
        let mut rng = stream_rng(21, 0);
        let data: Vec<f64> = (0..2 * 80).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Ensemble::new(DMatrix::from_vec(2, 80, data)).unwrap();
        let c = 2.0;
        let scaled = Ensemble::new(x.states() * c).unwrap();
        let opts = ElkdeOptions::with_projection(Projection::Naive { eps1: 1e-12 });
        let a = build_elkde(&x, BandwidthSpec::default(), &opts).unwrap();
        let b = build_elkde(&scaled, BandwidthSpec::default(), &opts).unwrap();
        for j in 0..80 {
            let ref_cov = a.covariance(j).matrix() * (c * c);
            let rel = (b.covariance(j).matrix() - &ref_cov).norm() / ref_cov.norm();
            // Any component that hit the (unscaled) floor is excused.
            let floored = SymmetricEigen::new(a.covariance(j).matrix().clone()).eigenvalues.min() < 1e-10;
            assert!(floored || rel < 1e-8, "component {j}: {rel}");
        }
    }

    #[test]
    fn wide_localization_recovers_sample_covariance() {
        let mut rng = stream_rng(31, 0);
        let data: Vec<f64> = (0..2 * 200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Ensemble::new(DMatrix::from_vec(2, 200, data)).unwrap();
        let sc = sample_covariance(&x).unwrap();
        let s = DMatrix::identity(2, 2) * 1e6;
        let xi = x.particle(5);
        let log_w: Vec<f64> = x
            .particles()
            .map(|xj| SpdMatrix::new(s.clone()).unwrap().log_density(xj, xi))
            .collect();
        let w = WeightVector::from_log_weights(&log_w).unwrap();
        let c = crate::numstat::weighted_covariance(&x, &w).unwrap();
        let sigma = localized_covariance(&c, &s, Projection::Naive { eps1: 1e-8 }).unwrap();
        let rel = (sigma.matrix() - &sc).norm() / sc.norm();
        assert!(rel < 1e-3, "{rel}");
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 1);
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    proptest! {
        #[test]
        fn gaussian_conditional_is_inverted_exactly(n in 1usize..=5, seed in 0u64..10_000) {
            let target = random_spd(n, seed);
            let s = random_spd(n, seed.wrapping_add(99_991));
            let c = &target * (&target + &s).try_inverse().unwrap() * &s;
            for projection in [Projection::Naive { eps1: 1e-8 }, Projection::Constituent { eps1: 1e-8, eps2: 1e-8 }] {
                let sigma = localized_covariance(&c, &s, projection).unwrap();
                let rel = (sigma.matrix() - &target).norm() / target.norm();
                prop_assert!(rel < 1e-10, "n={} rel={}", n, rel);
            }
        }
    }
}
