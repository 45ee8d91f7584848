//! Dense-matrix and statistics kernels shared by the estimators and filters.
//!
//! Everything here works on small dense matrices (state dimension up to a few
//! tens). Gaussian densities are always evaluated through a Cholesky factor in
//! the log domain; weights are only exponentiated after log-sum-exp
//! normalization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default tolerance on `1 - w'w` below which a weight vector is considered
/// collapsed.
pub const DEGENERATE_WEIGHT_TOL: f64 = 1e-12;

/// Relative asymmetry accepted by [`SpdMatrix::new`].
const SYMMETRY_TOL: f64 = 1e-12;

/// Random stream type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Derives an independent random stream from a 64-bit master seed.
///
/// The master seed keys a ChaCha8 generator and `stream` selects one of its
/// 2^64 counter-separated streams, so any two distinct `stream` values give
/// non-overlapping sequences regardless of the order in which they are
/// consumed.
pub fn stream_rng(master_seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// An `n x N` collection of state samples; column `j` is particle `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(states: DMatrix<f64>) -> Result<Self> {
        if states.nrows() == 0 || states.ncols() == 0 {
            return Err(Error::EmptyInput);
        }
        if !states.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence("ensemble contains non-finite entries".into()));
        }
        Ok(Self { states })
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = columns[0].len();
        if let Some(bad) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: bad.len() });
        }
        Self::new(DMatrix::from_columns(columns))
    }

    /// Builds an ensemble from scalar samples (a `1 x N` ensemble).
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, values.len(), values))
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    /// Number of particles `N`.
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn into_states(self) -> DMatrix<f64> {
        self.states
    }

    /// Particle `j` as a contiguous slice.
    pub fn particle(&self, j: usize) -> &[f64] {
        let n = self.dim();
        &self.states.as_slice()[j * n..(j + 1) * n]
    }

    pub fn particle_vector(&self, j: usize) -> DVector<f64> {
        DVector::from_column_slice(self.particle(j))
    }

    pub fn particles(&self) -> impl Iterator<Item = &[f64]> {
        self.states.as_slice().chunks_exact(self.dim())
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim());
        for x in self.particles() {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean / self.len() as f64
    }
}

/// A symmetric positive definite matrix together with its lower Cholesky
/// factor and log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    lower: DMatrix<f64>,
    log_det: f64,
}

impl SpdMatrix {
    /// Validates symmetry (relative tolerance 1e-12), stores the exact
    /// symmetrization and factorizes.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch { expected: matrix.nrows(), got: matrix.ncols() });
        }
        if matrix.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if !(asym <= SYMMETRY_TOL * scale) {
            return Err(Error::InvalidParameter(format!(
                "matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        Self::from_symmetrized(matrix)
    }

    /// Replaces the input by `(A + A') / 2` and factorizes it.
    pub fn from_symmetrized(mut matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch { expected: matrix.nrows(), got: matrix.ncols() });
        }
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        symmetrize(&mut matrix);
        let lower = matrix.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.unpack();
        let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { matrix, lower, log_det })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_symmetrized(DMatrix::identity(n, n)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Lower-triangular `L` with `L L' = A`.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Returns `A^{-1} b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.lower.solve_lower_triangular(b).expect("nonzero diagonal");
        self.lower.tr_solve_lower_triangular(&y).expect("nonzero diagonal")
    }

    /// `d' A^{-1} d` via forward substitution with the Cholesky factor.
    pub fn mahalanobis_sq(&self, diff: &[f64]) -> f64 {
        let n = self.dim();
        debug_assert_eq!(diff.len(), n);
        let mut stack = [0.0f64; 8];
        let mut heap;
        let y: &mut [f64] = if n <= stack.len() {
            &mut stack[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        let l = self.lower.as_slice();
        let mut total = 0.0;
        for i in 0..n {
            let mut acc = diff[i];
            for k in 0..i {
                acc -= l[i + k * n] * y[k];
            }
            let v = acc / l[i + i * n];
            y[i] = v;
            total += v * v;
        }
        total
    }

    /// `log N(x; m, A)` on raw slices.
    pub fn log_density(&self, x: &[f64], m: &[f64]) -> f64 {
        let n = self.dim();
        let mut stack = [0.0f64; 8];
        let d = if n <= stack.len() {
            for i in 0..n {
                stack[i] = x[i] - m[i];
            }
            self.mahalanobis_sq(&stack[..n])
        } else {
            let diff: Vec<f64> = x.iter().zip(m).map(|(a, b)| a - b).collect();
            self.mahalanobis_sq(&diff)
        };
        -0.5 * (d + self.log_det + n as f64 * LN_2PI)
    }
}

/// A nonnegative weight vector summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(DVector<f64>);

impl WeightVector {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::EmptyInput);
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
        }
        let sum = w.sum();
        if (sum - 1.0).abs() > 1e-12 * (w.len() as f64).max(1.0) {
            return Err(Error::InvalidParameter(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0 / n as f64))
    }

    /// Normalizes log-weights with log-sum-exp.
    pub fn from_log_weights(log_w: &[f64]) -> Result<Self> {
        let lse = logsumexp(log_w)?;
        if !lse.is_finite() {
            return Err(Error::Divergence(format!("log-weight normalizer is {lse}")));
        }
        Ok(Self(DVector::from_iterator(log_w.len(), log_w.iter().map(|a| (a - lse).exp()))))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    /// `w <- (1 - alpha) w + alpha / N`.
    pub fn nudged(mut self, alpha: f64) -> Self {
        let floor = alpha / self.0.len() as f64;
        for w in self.0.iter_mut() {
            *w = (1.0 - alpha) * *w + floor;
        }
        self
    }

    /// `w'w`.
    pub fn sum_of_squares(&self) -> f64 {
        self.0.iter().map(|w| w * w).sum()
    }
}

/// Replaces `a` by `(a + a') / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Unbiased sample covariance `X (I - 11'/N) X' / (N - 1)`.
pub fn sample_covariance(x: &Ensemble) -> Result<DMatrix<f64>> {
    let count = x.len();
    if count < 2 {
        return Err(Error::InsufficientSamples { required: 2, got: count });
    }
    let n = x.dim();
    let mean = x.mean();
    let mut cov = DMatrix::zeros(n, n);
    let mut centered = vec![0.0; n];
    for p in x.particles() {
        for (c, (v, m)) in centered.iter_mut().zip(p.iter().zip(mean.iter())) {
            *c = v - m;
        }
        accumulate_outer(&mut cov, &centered, 1.0);
    }
    mirror_upper(&mut cov);
    Ok(cov / (count - 1) as f64)
}

/// Importance-weighted covariance `X (diag w - w w') X' / (1 - w'w)`.
pub fn weighted_covariance(x: &Ensemble, w: &WeightVector) -> Result<DMatrix<f64>> {
    weighted_covariance_with_tol(x, w, DEGENERATE_WEIGHT_TOL)
}

pub fn weighted_covariance_with_tol(x: &Ensemble, w: &WeightVector, tol: f64) -> Result<DMatrix<f64>> {
    if w.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: w.len() });
    }
    weighted_covariance_raw(x, w.as_slice(), tol)
}

/// Weighted covariance on a raw weight slice (assumed to sum to one).
/// Particles with zero weight are skipped.
pub(crate) fn weighted_covariance_raw(x: &Ensemble, w: &[f64], tol: f64) -> Result<DMatrix<f64>> {
    let denom = 1.0 - w.iter().map(|v| v * v).sum::<f64>();
    if !(denom > tol) {
        return Err(Error::DegenerateWeights(denom));
    }
    let cov = match x.dim() {
        1 => weighted_scatter_fixed::<1>(x, w),
        2 => weighted_scatter_fixed::<2>(x, w),
        3 => weighted_scatter_fixed::<3>(x, w),
        _ => weighted_scatter(x, w),
    };
    Ok(cov / denom)
}

/// Two-pass `sum_j w_j (x_j - m)(x_j - m)'` with `m = sum_j w_j x_j`.
fn weighted_scatter(x: &Ensemble, w: &[f64]) -> DMatrix<f64> {
    let n = x.dim();
    let mut mean = vec![0.0; n];
    for (p, &wj) in x.particles().zip(w) {
        if wj != 0.0 {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += wj * v;
            }
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    let mut centered = vec![0.0; n];
    for (p, &wj) in x.particles().zip(w) {
        if wj != 0.0 {
            for (c, (v, m)) in centered.iter_mut().zip(p.iter().zip(&mean)) {
                *c = v - m;
            }
            accumulate_outer(&mut cov, &centered, wj);
        }
    }
    mirror_upper(&mut cov);
    cov
}

/// [`weighted_scatter`] with the dimension known at compile time; same
/// operation order, so the results agree bit for bit.
fn weighted_scatter_fixed<const D: usize>(x: &Ensemble, w: &[f64]) -> DMatrix<f64> {
    let data = x.states().as_slice();
    let mut mean = [0.0; D];
    for (p, &wj) in data.chunks_exact(D).zip(w) {
        if wj != 0.0 {
            for k in 0..D {
                mean[k] += wj * p[k];
            }
        }
    }
    let mut acc = [[0.0; D]; D];
    for (p, &wj) in data.chunks_exact(D).zip(w) {
        if wj != 0.0 {
            let c: [f64; D] = std::array::from_fn(|k| p[k] - mean[k]);
            for j in 0..D {
                let cj = wj * c[j];
                for i in 0..=j {
                    acc[j][i] += c[i] * cj;
                }
            }
        }
    }
    DMatrix::from_fn(D, D, |i, j| if i <= j { acc[j][i] } else { acc[i][j] })
}

/// Adds `scale * v v'` to the upper triangle of `acc`.
fn accumulate_outer(acc: &mut DMatrix<f64>, v: &[f64], scale: f64) {
    let n = v.len();
    let data = acc.as_mut_slice();
    for j in 0..n {
        let vj = scale * v[j];
        for i in 0..=j {
            data[i + j * n] += v[i] * vj;
        }
    }
}

fn mirror_upper(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            a[(i, j)] = a[(j, i)];
        }
    }
}

/// `log N(x; m, S)`.
pub fn log_gaussian(x: &DVector<f64>, m: &DVector<f64>, s: &SpdMatrix) -> Result<f64> {
    if x.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), got: x.len() });
    }
    if m.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), got: m.len() });
    }
    Ok(s.log_density(x.as_slice(), m.as_slice()))
}

/// Shift-stable `log sum exp(v)`. Returns `-inf` if every entry is `-inf`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !max.is_finite() {
        return Ok(max);
    }
    let sum: f64 = v.iter().map(|a| (a - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Floors the eigenvalues of the symmetric part of `a` at `eps`.
///
/// If every eigenvalue already exceeds `eps` the symmetrized input is
/// returned unchanged.
pub fn spd_floor(a: &DMatrix<f64>, eps: f64) -> Result<SpdMatrix> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("eigenvalue floor must be positive, got {eps}")));
    }
    if !a.is_square() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: a.ncols() });
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let mut sym = a.clone();
    symmetrize(&mut sym);
    // lambda_min(A) > eps exactly when A - eps I admits a Cholesky factor.
    let n = sym.nrows();
    if (&sym - DMatrix::from_diagonal_element(n, n, eps)).cholesky().is_some() {
        if let Ok(spd) = SpdMatrix::from_symmetrized(sym.clone()) {
            return Ok(spd);
        }
    }
    let eigen = SymmetricEigen::new(sym.clone());
    if eigen.eigenvalues.iter().all(|&l| l >= eps) {
        if let Ok(spd) = SpdMatrix::from_symmetrized(sym) {
            return Ok(spd);
        }
    }
    let clamped = eigen.eigenvalues.map(|l| l.max(eps));
    let q = &eigen.eigenvectors;
    let rebuilt = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    SpdMatrix::from_symmetrized(rebuilt)
}

/// Draws `n` independent standard normal values.
pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// One draw from `N(m, S)` as `m + L z`.
pub fn sample_gaussian<R: Rng + ?Sized>(m: &DVector<f64>, s: &SpdMatrix, rng: &mut R) -> Result<DVector<f64>> {
    if m.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), got: m.len() });
    }
    let z = standard_normal_vector(m.len(), rng);
    Ok(m + s.lower() * z)
}
