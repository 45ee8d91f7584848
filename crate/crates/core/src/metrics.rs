//! Accuracy metrics: integral squared error of a density estimate on a grid,
//! spatio-temporal RMSE and the scaled normalized estimation error squared.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::GaussianMixture;
use crate::numstat::{SpdMatrix, LN_2PI};

/// Squared Mahalanobis radius beyond which a component's contribution to a
/// grid cell is dropped (relative size below `exp(-32)`).
const GRID_CUTOFF: f64 = 64.0;

/// Default SNEES outlier threshold.
pub const SNEES_DISCARD_THRESHOLD: f64 = 100.0;

/// Regular grid of cell centers over an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl Default for EvalGrid {
    /// `[-8, 8]^2` with 256 cells per axis.
    fn default() -> Self {
        Self { lower: vec![-8.0; 2], upper: vec![8.0; 2], points: vec![256; 2] }
    }
}

impl EvalGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        let g = Self { lower, upper, points };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lower.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if self.upper.len() != n || self.points.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.upper.len().min(self.points.len()) });
        }
        for d in 0..n {
            let (lo, hi) = (self.lower[d], self.upper[d]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParameter(format!("grid axis {d} has bounds [{lo}, {hi}]")));
            }
            if self.points[d] < 2 {
                return Err(Error::InvalidParameter(format!("grid axis {d} needs at least 2 points")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / self.points[d] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.spacing(d)).product()
    }

    /// Center of cell `k` along axis `d`.
    pub fn coordinate(&self, d: usize, k: usize) -> f64 {
        self.lower[d] + (k as f64 + 0.5) * self.spacing(d)
    }

    /// Cell center for a flat index; the last axis varies fastest.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut rest = flat;
        let mut out = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            out[d] = self.coordinate(d, rest % self.points[d]);
            rest /= self.points[d];
        }
        out
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for d in (0..self.dim().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.points[d + 1];
        }
        strides
    }

    /// Evaluates `f` at every cell center, in flat-index order.
    pub fn map<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> Vec<f64> {
        (0..self.len()).map(|k| f(&self.point(k))).collect()
    }

    /// Density of `g` at every cell center. Each component only touches cells
    /// inside the bounding box of its `GRID_CUTOFF` Mahalanobis ellipsoid.
    pub fn mixture_density(&self, g: &GaussianMixture) -> Result<Vec<f64>> {
        let n = self.dim();
        if g.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, got: g.dim() });
        }
        let strides = self.strides();
        let h: Vec<f64> = (0..n).map(|d| self.spacing(d)).collect();
        let mut out = vec![0.0; self.len()];
        let mut lo = vec![0usize; n];
        let mut hi = vec![0usize; n];
        let mut idx = vec![0usize; n];
        let mut diff = vec![0.0; n];
        for j in 0..g.len() {
            let w = g.weights()[j];
            if w == 0.0 {
                continue;
            }
            let cov: &SpdMatrix = g.covariance(j);
            let precision = cov.solve(&DMatrix::identity(n, n));
            let log_norm = w.ln() - 0.5 * (n as f64 * LN_2PI + cov.log_det());
            let mean = g.mean(j);
            let mut empty = false;
            for d in 0..n {
                let half = (GRID_CUTOFF * cov.matrix()[(d, d)]).sqrt();
                let first = ((mean[d] - half - self.lower[d]) / h[d] - 0.5).ceil().max(0.0);
                let last = ((mean[d] + half - self.lower[d]) / h[d] - 0.5).floor().min((self.points[d] - 1) as f64);
                if !(first <= last) {
                    empty = true;
                    break;
                }
                lo[d] = first as usize;
                hi[d] = last as usize;
            }
            if empty {
                continue;
            }
            idx.copy_from_slice(&lo);
            'cells: loop {
                let mut flat = 0;
                for d in 0..n {
                    diff[d] = self.coordinate(d, idx[d]) - mean[d];
                    flat += idx[d] * strides[d];
                }
                let mut q = 0.0;
                for c in 0..n {
                    let mut row = 0.0;
                    for r in 0..n {
                        row += precision[(r, c)] * diff[r];
                    }
                    q += row * diff[c];
                }
                if q <= GRID_CUTOFF {
                    out[flat] += (log_norm - 0.5 * q).exp();
                }
                // Odometer over the box, last axis fastest.
                let mut d = n;
                loop {
                    if d == 0 {
                        break 'cells;
                    }
                    d -= 1;
                    if idx[d] < hi[d] {
                        idx[d] += 1;
                        break;
                    }
                    idx[d] = lo[d];
                }
            }
        }
        Ok(out)
    }
}

/// `sum (a - b)^2 * cell_volume` over matching grid values.
pub fn ise_from_values(p_true: &[f64], p_est: &[f64], cell_volume: f64) -> Result<f64> {
    if p_true.len() != p_est.len() {
        return Err(Error::DimensionMismatch { expected: p_true.len(), got: p_est.len() });
    }
    let sum: f64 = p_true.iter().zip(p_est).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum * cell_volume)
}

/// Integral squared error between precomputed true grid values and a mixture
/// estimate evaluated on the same grid.
pub fn ise_on_grid(p_true: &[f64], estimate: &GaussianMixture, grid: &EvalGrid) -> Result<f64> {
    if p_true.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), got: p_true.len() });
    }
    if p_true.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidParameter("true density values must be finite and nonnegative".into()));
    }
    let est = grid.mixture_density(estimate)?;
    ise_from_values(p_true, &est, grid.cell_volume())
}

/// Per-step filter output and truth for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub truth: Vec<DVector<f64>>,
    pub mean: Vec<DVector<f64>>,
    pub covariance: Vec<DMatrix<f64>>,
}

impl RunRecord {
    pub fn with_capacity(steps: usize) -> Self {
        Self {
            truth: Vec::with_capacity(steps),
            mean: Vec::with_capacity(steps),
            covariance: Vec::with_capacity(steps),
        }
    }

    pub fn push(&mut self, truth: DVector<f64>, mean: DVector<f64>, covariance: DMatrix<f64>) {
        self.truth.push(truth);
        self.mean.push(mean);
        self.covariance.push(covariance);
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Copy without the first `spinup` steps.
    pub fn after_spinup(&self, spinup: usize) -> Self {
        let s = spinup.min(self.len());
        Self {
            truth: self.truth[s..].to_vec(),
            mean: self.mean[s..].to_vec(),
            covariance: self.covariance[s..].to_vec(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != self.truth.len() || self.covariance.len() != self.truth.len() {
            return Err(Error::DimensionMismatch { expected: self.truth.len(), got: self.mean.len() });
        }
        Ok(())
    }
}

/// Root mean squared error over every scalar of every step of every run.
pub fn rmse(runs: &[RunRecord]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for run in runs {
        run.check()?;
        for (t, m) in run.truth.iter().zip(&run.mean) {
            if t.len() != m.len() {
                return Err(Error::DimensionMismatch { expected: t.len(), got: m.len() });
            }
            sum += (m - t).norm_squared();
            count += t.len();
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    Ok((sum / count as f64).sqrt())
}

/// SNEES value with its outlier bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SneesReport {
    pub value: f64,
    pub kept: usize,
    pub discarded: usize,
}

impl SneesReport {
    pub fn discard_fraction(&self) -> f64 {
        self.discarded as f64 / (self.kept + self.discarded) as f64
    }
}

/// Scaled normalized estimation error squared: the mean of
/// `e' S^{-1} e / n` over steps, skipping terms above `discard_threshold`
/// and steps whose covariance cannot be factorized.
pub fn snees(runs: &[RunRecord], discard_threshold: f64) -> Result<SneesReport> {
    let mut sum = 0.0;
    let mut kept = 0;
    let mut discarded = 0;
    let mut dim = 0;
    for run in runs {
        run.check()?;
        for ((t, m), s) in run.truth.iter().zip(&run.mean).zip(&run.covariance) {
            dim = t.len();
            let e = m - t;
            let term = SpdMatrix::from_symmetrized(s.clone()).map(|spd| spd.mahalanobis_sq(e.as_slice()));
            match term {
                Ok(v) if v.is_finite() && v <= discard_threshold => {
                    sum += v;
                    kept += 1;
                }
                _ => discarded += 1,
            }
        }
    }
    if kept + discarded == 0 {
        return Err(Error::EmptyInput);
    }
    if kept == 0 {
        return Err(Error::AllTermsDiscarded { total: discarded, threshold: discard_threshold });
    }
    Ok(SneesReport { value: sum / (dim * kept) as f64, kept, discarded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numstat::stream_rng;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector, Rotation3};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn two_bumps(shift: f64) -> GaussianMixture {
        let c1 = SpdMatrix::new(dmatrix![1.0, 0.3; 0.3, 0.8]).unwrap();
        let c2 = SpdMatrix::new(dmatrix![0.5, 0.0; 0.0, 1.5]).unwrap();
        GaussianMixture::new(vec![0.3, 0.7], dmatrix![-1.5 + shift, 2.0 + shift; 0.5, -1.0], vec![c1, c2]).unwrap()
    }

    #[test]
    fn grid_geometry() {
        let g = EvalGrid::new(vec![0.0, -1.0], vec![1.0, 1.0], vec![2, 4]).unwrap();
        assert_eq!(g.len(), 8);
        assert_relative_eq!(g.cell_volume(), 0.25);
        assert_eq!(g.point(0), vec![0.25, -0.75]);
        assert_eq!(g.point(1), vec![0.25, -0.25]);
        assert_eq!(g.point(7), vec![0.75, 0.75]);
        assert!(EvalGrid::new(vec![0.0], vec![0.0], vec![4]).is_err());
        assert!(EvalGrid::new(vec![0.0], vec![1.0], vec![1]).is_err());
    }

    #[test]
    fn fast_grid_density_matches_direct_evaluation() {
        let g = EvalGrid::new(vec![-6.0, -5.0], vec![6.0, 5.0], vec![60, 50]).unwrap();
        let m = two_bumps(0.0);
        let fast = g.mixture_density(&m).unwrap();
        let direct = g.map(|p| m.logpdf(p).exp());
        for (a, b) in fast.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-14 + 1e-12 * b);
        }
    }

    #[test]
    fn fast_grid_density_in_three_dimensions() {
        let g = EvalGrid::new(vec![-4.0; 3], vec![4.0; 3], vec![10, 12, 14]).unwrap();
        let c = SpdMatrix::new(dmatrix![1.0, 0.2, 0.0; 0.2, 0.6, 0.1; 0.0, 0.1, 0.9]).unwrap();
        let m = GaussianMixture::new(vec![1.0], dmatrix![0.5; -0.3; 0.1], vec![c]).unwrap();
        let fast = g.mixture_density(&m).unwrap();
        let direct = g.map(|p| m.logpdf(p).exp());
        for (a, b) in fast.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-14 + 1e-12 * b);
        }
    }

    #[test]
    fn ise_examples() {
        let g = EvalGrid::new(vec![-6.0, -6.0], vec![6.0, 6.0], vec![64, 64]).unwrap();
        let m = two_bumps(0.0);
        let p = g.mixture_density(&m).unwrap();
        assert_eq!(ise_on_grid(&p, &m, &g).unwrap(), 0.0);

        let a = vec![0.7; g.len()];
        let b = vec![0.2; g.len()];
        assert_relative_eq!(ise_from_values(&a, &b, g.cell_volume()).unwrap(), 0.25 * 144.0, max_relative = 1e-12);
    }

    #[test]
    fn ise_converges_under_grid_refinement() {
        let ise_at = |cells: usize| {
            let g = EvalGrid::new(vec![-8.0, -8.0], vec![8.0, 8.0], vec![cells, cells]).unwrap();
            let p = g.mixture_density(&two_bumps(0.0)).unwrap();
            ise_on_grid(&p, &two_bumps(0.1), &g).unwrap()
        };
        let coarse = ise_at(64);
        let fine = ise_at(128);
        assert!(coarse > 0.0);
        assert!((coarse - fine).abs() / fine < 0.02);
    }

    #[test]
    fn ise_rejects_negative_truth() {
        let g = EvalGrid::new(vec![0.0], vec![1.0], vec![2]).unwrap();
        let m = GaussianMixture::new(vec![1.0], dmatrix![0.5], vec![SpdMatrix::identity(1)]).unwrap();
        assert!(ise_on_grid(&[0.1, -0.1], &m, &g).is_err());
    }

    fn record(errors: &[DVector<f64>], cov: DMatrix<f64>) -> RunRecord {
        let mut r = RunRecord::default();
        for e in errors {
            r.push(DVector::zeros(e.len()), e.clone(), cov.clone());
        }
        r
    }

    #[test]
    fn rmse_examples() {
        let zero = record(&vec![dvector![0.0, 0.0, 0.0]; 4], DMatrix::identity(3, 3));
        assert_eq!(rmse(&[zero]).unwrap(), 0.0);
        let ones = record(&vec![dvector![1.0, -1.0, 1.0]; 5], DMatrix::identity(3, 3));
        assert_relative_eq!(rmse(&[ones]).unwrap(), 1.0);
        let one = record(&[dvector![3.0, 4.0, 0.0]], DMatrix::identity(3, 3));
        assert_relative_eq!(rmse(&[one]).unwrap(), (25.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert!(matches!(rmse(&[RunRecord::default()]), Err(Error::EmptyInput)));
    }

    #[test]
    fn spinup_is_dropped() {
        let r = record(&[dvector![10.0], dvector![1.0], dvector![1.0]], DMatrix::identity(1, 1));
        assert_relative_eq!(rmse(&[r.after_spinup(1)]).unwrap(), 1.0);
        assert_eq!(r.after_spinup(5).len(), 0);
    }

    #[test]
    fn snees_examples() {
        let zero = record(&vec![dvector![0.0, 0.0]; 3], DMatrix::identity(2, 2));
        assert_eq!(snees(&[zero], SNEES_DISCARD_THRESHOLD).unwrap().value, 0.0);

        let unit = record(&[dvector![1.0, 1.0], dvector![0.0, 2f64.sqrt()]], DMatrix::identity(2, 2));
        assert_relative_eq!(snees(&[unit], SNEES_DISCARD_THRESHOLD).unwrap().value, 1.0, epsilon = 1e-15);

        let mut errors = vec![dvector![1.0]; 9];
        errors.push(dvector![101f64.sqrt()]);
        let report = snees(&[record(&errors, DMatrix::identity(1, 1))], SNEES_DISCARD_THRESHOLD).unwrap();
        assert_relative_eq!(report.value, 1.0, epsilon = 1e-14);
        assert_eq!((report.kept, report.discarded), (9, 1));
        assert_relative_eq!(report.discard_fraction(), 0.1);
    }

    #[test]
    fn snees_discards_singular_covariances() {
        let mut r = record(&[dvector![1.0, 0.0]], DMatrix::identity(2, 2));
        r.push(DVector::zeros(2), dvector![1.0, 1.0], DMatrix::zeros(2, 2));
        let report = snees(&[r], SNEES_DISCARD_THRESHOLD).unwrap();
        assert_eq!(report.discarded, 1);
        assert_relative_eq!(report.value, 0.5);

        let bad = record(&[dvector![50.0]], DMatrix::identity(1, 1));
        assert!(matches!(snees(&[bad], SNEES_DISCARD_THRESHOLD), Err(Error::AllTermsDiscarded { .. })));
    }

    fn random_record(seed: u64) -> RunRecord {
        let mut rng = stream_rng(seed, 0);
        let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
        let mut r = RunRecord::default();
        for _ in 0..6 {
            let a = DMatrix::from_fn(3, 3, |_, _| normal());
            let cov = &a * a.transpose() + DMatrix::identity(3, 3);
            let e = DVector::from_fn(3, |_, _| 0.5 * normal());
            r.push(DVector::from_fn(3, |_, _| normal()), DVector::zeros(3), cov);
            let last = r.len() - 1;
            r.mean[last] = &r.truth[last] + e;
        }
        r
    }

    proptest! {
        #[test]
        fn snees_rotation_invariant(seed in 0u64..1000, ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0) {
            let r = random_record(seed);
            let q = Rotation3::from_euler_angles(ax, ay, az).into_inner();
            let q = DMatrix::from_column_slice(3, 3, q.as_slice());
            let mut rotated = RunRecord::default();
            for k in 0..r.len() {
                let e = &r.mean[k] - &r.truth[k];
                rotated.push(DVector::zeros(3), &q * e, &q * &r.covariance[k] * q.transpose());
            }
            let a = snees(&[r], 1e300).unwrap().value;
            let b = snees(&[rotated], 1e300).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        }

        #[test]
        fn snees_scales_inversely(seed in 0u64..1000, c in 0.1f64..10.0) {
            let r = random_record(seed);
            let mut scaled = r.clone();
            scaled.covariance.iter_mut().for_each(|s| *s *= c);
            let a = snees(&[r], 1e300).unwrap().value;
            let b = snees(&[scaled], 1e300).unwrap().value;
            prop_assert!((a / c - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn rmse_ignores_step_order(seed in 0u64..1000, rot in 0usize..6) {
            let r = random_record(seed);
            let mut p = r.clone();
            p.truth.rotate_left(rot);
            p.mean.rotate_left(rot);
            p.covariance.rotate_left(rot);
            let a = rmse(&[r]).unwrap();
            let b = rmse(&[p]).unwrap();
            prop_assert!((a - b).abs() <= 1e-14 * a);
        }

        #[test]
        fn ise_is_nonnegative(shift in -1.0f64..1.0) {
            let g = EvalGrid::new(vec![-8.0, -8.0], vec![8.0, 8.0], vec![32, 32]).unwrap();
            let p = g.mixture_density(&two_bumps(0.0)).unwrap();
            let v = ise_on_grid(&p, &two_bumps(shift), &g).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!(shift.abs() < 1e-3 || v > 0.0);
        }
    }
}
