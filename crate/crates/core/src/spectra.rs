//! Positive-semidefinite linear algebra for update covariances: estimation
//! from clipped gradients, (blockwise) eigendecomposition, eigenvalue
//! flooring, Gaussian sampling, Rényi divergence between Gaussians and span
//! membership.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

/// Default threshold, relative to the largest eigenvalue, below which an
/// eigenvalue counts as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-9;
const NEGATIVE_CLAMP: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NonSymmetric(f64),
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("no gradients supplied")]
    EmptyGradients,
    #[error("block boundaries do not partition 0..{dim}")]
    BlockMismatch { dim: usize },
    #[error("model carries {have} eigenpairs but dimension is {dim}")]
    PartialSpectrum { have: usize, dim: usize },
    #[error("(1-alpha) Σp + alpha Σq is not positive definite")]
    IndefiniteSigmaAlpha,
    #[error("covariance is rank deficient")]
    SingularCovariance,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gradient {index} has norm {norm:e} above the clip bound {clip:e}")]
    ClipViolated { index: usize, norm: f64, clip: f64 },
    #[error("matrix has a negative eigenvalue {0:e}")]
    NotPositiveSemidefinite(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

pub type Result<T> = std::result::Result<T, SpectraError>;

/// Clipped per-example gradients of one user, one column per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMatrix<T> {
    dim: usize,
    clip_bound: T,
    columns: Vec<Vec<T>>,
}

impl<T: Scalar> GradientMatrix<T> {
    /// Validates that every column has length `dim` and norm at most the clip
    /// bound (with a small relative slack).
    pub fn new(dim: usize, columns: Vec<Vec<T>>, clip_bound: T) -> Result<Self> {
        if !(clip_bound > T::zero()) {
            return Err(SpectraError::InvalidArgument("clip bound must be positive"));
        }
        let limit = clip_bound * (T::one() + T::slack(1e-9));
        for (index, col) in columns.iter().enumerate() {
            if col.len() != dim {
                return Err(SpectraError::DimensionMismatch {
                    expected: dim,
                    got: col.len(),
                });
            }
            if col.iter().any(|x| !x.is_finite()) {
                return Err(SpectraError::NonFinite);
            }
            let n = linalg::norm(col);
            if n > limit {
                return Err(SpectraError::ClipViolated {
                    index,
                    norm: n.as_f64(),
                    clip: clip_bound.as_f64(),
                });
            }
        }
        Ok(Self {
            dim,
            clip_bound,
            columns,
        })
    }

    /// Clips each raw gradient to `clip_bound` before storing it.
    pub fn from_unclipped(dim: usize, raw: Vec<Vec<T>>, clip_bound: T) -> Result<Self> {
        let columns = raw
            .into_iter()
            .map(|g| crate::mechanisms::clip_gradient(&g, clip_bound).map_err(|_| SpectraError::NonFinite))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, columns, clip_bound)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.columns.len()
    }

    pub fn clip_bound(&self) -> T {
        self.clip_bound
    }

    pub fn columns(&self) -> &[Vec<T>] {
        &self.columns
    }

    pub fn mean(&self) -> Vec<T> {
        let mut mean = vec![T::zero(); self.dim];
        if self.columns.is_empty() {
            return mean;
        }
        for col in &self.columns {
            linalg::axpy(&mut mean, T::one(), col);
        }
        let inv = T::one() / T::of(self.columns.len() as f64);
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    /// Returns a copy with column `index` replaced (the neighbouring dataset).
    pub fn with_replaced(&self, index: usize, column: Vec<T>) -> Result<Self> {
        let mut columns = self.columns.clone();
        columns[index] = column;
        Self::new(self.dim, columns, self.clip_bound)
    }
}

/// How a covariance was scaled when it was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleNote {
    pub batch: u64,
    pub count: u64,
    pub centered: bool,
}

/// Mean plus eigen-factorisation `Σ = U diag(Λ) Uᵀ` of a Gaussian model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel<T> {
    pub mean: Vec<T>,
    /// `d x r`, orthonormal columns.
    pub eigvecs: Matrix<T>,
    /// Non-increasing, non-negative.
    pub eigvals: Vec<T>,
    pub rank_tol: T,
    pub scale_note: Option<ScaleNote>,
}

impl<T: Scalar> CovarianceModel<T> {
    /// Point mass at `mean` (full-dimension spectrum of zeros).
    pub fn degenerate(mean: Vec<T>) -> Self {
        let d = mean.len();
        Self {
            mean,
            eigvecs: Matrix::identity(d),
            eigvals: vec![T::zero(); d],
            rank_tol: T::of(DEFAULT_RANK_TOL),
            scale_note: None,
        }
    }

    pub fn isotropic(mean: Vec<T>, variance: T) -> Self {
        let d = mean.len();
        Self {
            mean,
            eigvecs: Matrix::identity(d),
            eigvals: vec![variance; d],
            rank_tol: T::of(DEFAULT_RANK_TOL),
            scale_note: None,
        }
    }

    /// Decomposes `cov` and attaches `mean`.
    pub fn from_covariance(mean: Vec<T>, cov: &Matrix<T>) -> Result<Self> {
        if mean.len() != cov.rows() {
            return Err(SpectraError::DimensionMismatch {
                expected: cov.rows(),
                got: mean.len(),
            });
        }
        let mut model = eig_decompose(cov, T::of(DEFAULT_RANK_TOL))?;
        model.mean = mean;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of stored eigenpairs.
    pub fn pairs(&self) -> usize {
        self.eigvals.len()
    }

    pub fn lambda_max(&self) -> T {
        self.eigvals.first().copied().unwrap_or_else(T::zero)
    }

    /// Last stored eigenvalue.
    pub fn lambda_min(&self) -> T {
        self.eigvals.last().copied().unwrap_or_else(T::zero)
    }

    fn zero_threshold(&self) -> T {
        self.rank_tol * self.lambda_max()
    }

    /// Smallest eigenvalue above `rank_tol * λ_max`, if any.
    pub fn lambda_min_nonzero(&self) -> Option<T> {
        let thr = self.zero_threshold();
        self.eigvals.iter().rev().copied().find(|&l| l > thr)
    }

    pub fn rank(&self) -> usize {
        let thr = self.zero_threshold();
        self.eigvals.iter().filter(|&&l| l > thr).count()
    }

    /// Full rank with a strictly positive smallest eigenvalue.
    pub fn is_nonsingular(&self) -> bool {
        self.pairs() == self.dim() && self.rank() == self.dim() && self.lambda_min() > T::zero()
    }

    pub fn trace(&self) -> T {
        self.eigvals.iter().fold(T::zero(), |a, &b| a + b)
    }

    /// `U diag(Λ) Uᵀ`.
    pub fn covariance(&self) -> Matrix<T> {
        let d = self.dim();
        let mut cov = Matrix::zeros(d, d);
        for (k, &l) in self.eigvals.iter().enumerate() {
            if l == T::zero() {
                continue;
            }
            cov.add_outer(&self.eigvecs.column(k), l);
        }
        cov
    }

    /// `L = U Λ^{1/2}`, `d x r`.
    pub fn factor(&self) -> Matrix<T> {
        let d = self.dim();
        Matrix::from_fn(d, self.pairs(), |i, k| {
            self.eigvecs[(i, k)] * self.eigvals[k].max(T::zero()).sqrt()
        })
    }

    /// Eigenvectors with eigenvalue above the rank threshold.
    pub fn support(&self) -> Vec<Vec<T>> {
        let thr = self.zero_threshold();
        self.eigvals
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > thr)
            .map(|(k, _)| self.eigvecs.column(k))
            .collect()
    }

    pub fn with_mean(mut self, mean: Vec<T>) -> Self {
        assert_eq!(mean.len(), self.dim());
        self.mean = mean;
        self
    }

    /// Model of the sum of independent Gaussians: means and covariances add.
    pub fn sum<'a>(models: impl IntoIterator<Item = &'a Self>) -> Result<Self> {
        let mut iter = models.into_iter();
        let first = iter.next().ok_or(SpectraError::EmptyGradients)?;
        let d = first.dim();
        let mut mean = first.mean.clone();
        let mut cov = first.covariance();
        for m in iter {
            if m.dim() != d {
                return Err(SpectraError::DimensionMismatch {
                    expected: d,
                    got: m.dim(),
                });
            }
            linalg::axpy(&mut mean, T::one(), &m.mean);
            cov = cov.add(&m.covariance());
        }
        Self::from_covariance(mean, &cov)
    }
}

/// Partition of `0..dim` into contiguous, non-empty blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    dim: usize,
    boundaries: Vec<Range<usize>>,
}

impl BlockSpec {
    pub fn new(dim: usize, boundaries: Vec<Range<usize>>) -> Result<Self> {
        let mut next = 0;
        for r in &boundaries {
            if r.start != next || r.end <= r.start {
                return Err(SpectraError::BlockMismatch { dim });
            }
            next = r.end;
        }
        if next != dim || boundaries.is_empty() {
            return Err(SpectraError::BlockMismatch { dim });
        }
        Ok(Self { dim, boundaries })
    }

    /// `k` blocks of near-equal size; the first `dim % k` blocks get one extra
    /// coordinate.
    pub fn even(dim: usize, k: usize) -> Result<Self> {
        if k == 0 || k > dim {
            return Err(SpectraError::BlockMismatch { dim });
        }
        let base = dim / k;
        let extra = dim % k;
        let mut start = 0;
        let boundaries = (0..k)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Self::new(dim, boundaries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[Range<usize>] {
        &self.boundaries
    }
}

/// Eigendecomposition of a symmetric PSD matrix, mean left at zero.
pub fn eig_decompose<T: Scalar>(sym: &Matrix<T>, rank_tol: T) -> Result<CovarianceModel<T>> {
    if !sym.is_square() || sym.rows() == 0 {
        return Err(SpectraError::InvalidArgument("expected a non-empty square matrix"));
    }
    if !sym.is_finite() {
        return Err(SpectraError::NonFinite);
    }
    let tol = T::slack(SYMMETRY_TOL) * sym.max_abs().max(T::one());
    let asym = sym.asymmetry();
    if asym > tol {
        return Err(SpectraError::NonSymmetric(asym.as_f64()));
    }
    let (mut values, vectors) = linalg::symmetric_eigen(sym);
    let lmax = values.first().copied().unwrap_or_else(T::zero).abs();
    let clamp = T::slack(NEGATIVE_CLAMP) * lmax.max(T::one());
    for v in values.iter_mut() {
        if *v < T::zero() {
            if *v < -clamp {
                return Err(SpectraError::NotPositiveSemidefinite(v.as_f64()));
            }
            *v = T::zero();
        }
    }
    Ok(CovarianceModel {
        mean: vec![T::zero(); sym.rows()],
        eigvecs: vectors,
        eigvals: values,
        rank_tol,
        scale_note: None,
    })
}

/// Options for [`estimate_mean_cov_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceOptions {
    /// Subtract the mean before forming the second moment.
    pub centered: bool,
    pub blocks: Option<BlockSpec>,
    pub rank_tol: f64,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self {
            centered: false,
            blocks: None,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

/// `μ = (1/D) Σ g_j` and `Σ = (1/(B D)) Σ g_j g_jᵀ` (uncentered), optionally
/// block-diagonal.
pub fn estimate_mean_cov<T: Scalar>(
    g: &GradientMatrix<T>,
    batch: usize,
    blocks: Option<&BlockSpec>,
) -> Result<CovarianceModel<T>> {
    let opts = CovarianceOptions {
        blocks: blocks.cloned(),
        ..CovarianceOptions::default()
    };
    estimate_mean_cov_with(g, batch, &opts)
}

pub fn estimate_mean_cov_with<T: Scalar>(
    g: &GradientMatrix<T>,
    batch: usize,
    opts: &CovarianceOptions,
) -> Result<CovarianceModel<T>> {
    if g.count() == 0 {
        return Err(SpectraError::EmptyGradients);
    }
    if batch == 0 {
        return Err(SpectraError::InvalidArgument("batch must be positive"));
    }
    let d = g.dim();
    if let Some(b) = &opts.blocks {
        if b.dim() != d {
            return Err(SpectraError::BlockMismatch { dim: d });
        }
    }
    let mean = g.mean();
    let scale = T::one() / (T::of(batch as f64) * T::of(g.count() as f64));
    let rank_tol = T::of(opts.rank_tol);
    let note = Some(ScaleNote {
        batch: batch as u64,
        count: g.count() as u64,
        centered: opts.centered,
    });

    let ranges: Vec<Range<usize>> = match &opts.blocks {
        Some(b) => b.boundaries().to_vec(),
        None => vec![0..d],
    };

    // Cancellation in the centered form leaves round-off of the order of the
    // uncentered second moment; eigenvalues below that level are zero.
    let raw_trace = g
        .columns()
        .iter()
        .fold(T::zero(), |acc, c| acc + linalg::dot(c, c))
        * scale;
    let abs_floor = rank_tol * raw_trace;
    let mut pairs: Vec<(T, Vec<T>)> = Vec::with_capacity(d);
    for r in ranges {
        let w = r.len();
        let mut cov = Matrix::zeros(w, w);
        for col in g.columns() {
            let piece: Vec<T> = if opts.centered {
                col[r.clone()].iter().zip(&mean[r.clone()]).map(|(&x, &m)| x - m).collect()
            } else {
                col[r.clone()].to_vec()
            };
            cov.add_outer(&piece, scale);
        }
        let block = eig_decompose(&cov, rank_tol)?;
        for k in 0..w {
            let mut v = vec![T::zero(); d];
            for (i, idx) in r.clone().enumerate() {
                v[idx] = block.eigvecs[(i, k)];
            }
            let l = block.eigvals[k];
            pairs.push((if l < abs_floor { T::zero() } else { l }, v));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let eigvals: Vec<T> = pairs.iter().map(|p| p.0).collect();
    let cols: Vec<Vec<T>> = pairs.into_iter().map(|p| p.1).collect();
    Ok(CovarianceModel {
        mean,
        eigvecs: Matrix::from_columns(d, &cols),
        eigvals,
        rank_tol,
        scale_note: note,
    })
}

/// Raises every eigenvalue to at least `floor`. Returns the floored model and
/// the added part `ΔΣ` (same eigenvectors, zero mean).
pub fn floor_eigenvalues<T: Scalar>(
    model: &CovarianceModel<T>,
    floor: T,
) -> Result<(CovarianceModel<T>, CovarianceModel<T>)> {
    if !(floor >= T::zero()) {
        return Err(SpectraError::InvalidArgument("floor must be non-negative"));
    }
    if model.pairs() != model.dim() {
        return Err(SpectraError::PartialSpectrum {
            have: model.pairs(),
            dim: model.dim(),
        });
    }
    // Order is preserved: max(·, floor) is monotone.
    let floored_vals: Vec<T> = model.eigvals.iter().map(|&l| l.max(floor)).collect();
    let delta_vals: Vec<T> = model
        .eigvals
        .iter()
        .zip(&floored_vals)
        .map(|(&l, &f)| f - l)
        .collect();
    let floored = CovarianceModel {
        eigvals: floored_vals,
        ..model.clone()
    };
    // Increments are not sorted in general; reorder to keep the invariant.
    let mut order: Vec<usize> = (0..delta_vals.len()).collect();
    order.sort_by(|&a, &b| {
        delta_vals[b]
            .partial_cmp(&delta_vals[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let d = model.dim();
    let delta = CovarianceModel {
        mean: vec![T::zero(); d],
        eigvecs: Matrix::from_fn(d, d, |i, k| model.eigvecs[(i, order[k])]),
        eigvals: order.iter().map(|&k| delta_vals[k]).collect(),
        rank_tol: model.rank_tol,
        scale_note: model.scale_note,
    };
    Ok((floored, delta))
}

/// Draws `μ + U Λ^{1/2} v`, `v ~ N(0, I_r)`.
pub fn sample_gaussian<T: Scalar, R: Rng + ?Sized>(model: &CovarianceModel<T>, rng: &mut R) -> Result<Vec<T>> {
    if model.eigvals.iter().any(|l| !l.is_finite() || *l < T::zero()) {
        return Err(SpectraError::NonFinite);
    }
    let mut out = model.mean.clone();
    for (k, &l) in model.eigvals.iter().enumerate() {
        let z = T::standard_normal(rng);
        let s = l.sqrt() * z;
        if s == T::zero() {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += model.eigvecs[(i, k)] * s;
        }
    }
    Ok(out)
}

/// Rényi divergence `D_α(N(μp, Σp) ‖ N(μq, Σq))` between two full-rank
/// Gaussian models.
pub fn renyi_gaussian<T: Scalar>(alpha: T, p: &CovarianceModel<T>, q: &CovarianceModel<T>) -> Result<T> {
    if p.dim() != q.dim() {
        return Err(SpectraError::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if !p.is_nonsingular() || !q.is_nonsingular() {
        return Err(SpectraError::SingularCovariance);
    }
    renyi_gaussian_dense(alpha, &p.mean, &p.covariance(), &q.mean, &q.covariance())
}

/// Dense-matrix form of [`renyi_gaussian`]:
/// `(α/2) Δᵀ Σα⁻¹ Δ − ln(|Σα| / (|Σp|^{1−α} |Σq|^α)) / (2(α−1))`,
/// `Σα = (1−α) Σp + α Σq`.
pub fn renyi_gaussian_dense<T: Scalar>(
    alpha: T,
    mean_p: &[T],
    cov_p: &Matrix<T>,
    mean_q: &[T],
    cov_q: &Matrix<T>,
) -> Result<T> {
    if !(alpha > T::zero()) || alpha == T::one() {
        return Err(SpectraError::InvalidArgument("alpha must be positive and differ from 1"));
    }
    let d = mean_p.len();
    for n in [mean_q.len(), cov_p.rows(), cov_q.rows()] {
        if n != d {
            return Err(SpectraError::DimensionMismatch { expected: d, got: n });
        }
    }
    let lp = linalg::cholesky(cov_p).ok_or(SpectraError::SingularCovariance)?;
    let lq = linalg::cholesky(cov_q).ok_or(SpectraError::SingularCovariance)?;
    let sigma_alpha = cov_p.scale(T::one() - alpha).add(&cov_q.scale(alpha));
    let la = linalg::cholesky(&sigma_alpha).ok_or(SpectraError::IndefiniteSigmaAlpha)?;

    let diff = linalg::sub_vec(mean_p, mean_q);
    let w = linalg::solve_lower(&la, &diff);
    let quad = linalg::dot(&w, &w);

    let ln_a = linalg::log_det_cholesky(&la);
    let ln_p = linalg::log_det_cholesky(&lp);
    let ln_q = linalg::log_det_cholesky(&lq);
    let log_ratio = ln_a - (T::one() - alpha) * ln_p - alpha * ln_q;
    let value = alpha / T::of(2.0) * quad - log_ratio / (T::of(2.0) * (alpha - T::one()));
    if !value.is_finite() {
        return Err(SpectraError::NonFinite);
    }
    Ok(value.max(T::zero()))
}

/// Whether `v` lies in the column space of `columns` up to `tol`.
///
/// Rank is decided by singular values above `tol · σ_max`; membership by the
/// projection residual being at most `tol · max(‖v‖, 1)`.
pub fn span_contains<T: Scalar>(columns: &[Vec<T>], v: &[T], tol: T) -> Result<bool> {
    if !(tol > T::zero()) {
        return Err(SpectraError::InvalidArgument("tol must be positive"));
    }
    let d = v.len();
    if let Some(bad) = columns.iter().find(|c| c.len() != d) {
        return Err(SpectraError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let vnorm = linalg::norm(v);
    let allowed = tol * vnorm.max(T::one());
    if vnorm == T::zero() {
        return Ok(true);
    }
    let (sv, left) = linalg::column_svd(d, columns);
    let smax = sv.first().copied().unwrap_or_else(T::zero);
    let basis: Vec<&Vec<T>> = sv
        .iter()
        .zip(&left)
        .filter(|(&s, _)| s > tol * smax && s > T::zero())
        .map(|(_, u)| u)
        .collect();
    let mut r = v.to_vec();
    // Two projection passes for numerical orthogonality.
    for _ in 0..2 {
        for u in &basis {
            let c = linalg::dot(u, &r);
            linalg::axpy(&mut r, -c, u);
        }
    }
    Ok(linalg::norm(&r) <= allowed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut ChaCha20Rng, n: usize, m: usize) -> Matrix<f64> {
        Matrix::from_fn(n, m, |_, _| r.random_range(-1.0..1.0))
    }

    fn random_gradients(r: &mut ChaCha20Rng, d: usize, count: usize, clip: f64) -> GradientMatrix<f64> {
        let raw = (0..count)
            .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        GradientMatrix::from_unclipped(d, raw, clip).unwrap()
    }

    #[test]
    fn identity_decomposes_to_ones() {
        let m = eig_decompose(&Matrix::<f64>::identity(3), 1e-10).unwrap();
        assert_eq!(m.eigvals, vec![1.0, 1.0, 1.0]);
        let gram = m.eigvecs.transpose().matmul(&m.eigvecs);
        assert!(gram.sub(&Matrix::identity(3)).max_abs() < 1e-15);
    }

    #[test]
    fn diagonal_decomposes_to_axes() {
        let m = eig_decompose(&Matrix::from_diagonal(&[0.5f64, 0.02, 0.0]), 1e-10).unwrap();
        assert_eq!(m.eigvals, vec![0.5, 0.02, 0.0]);
        for k in 0..3 {
            let col = m.eigvecs.column(k);
            assert_eq!(col.iter().filter(|x| x.abs() == 1.0).count(), 1);
        }
        assert_eq!(m.rank(), 2);
        assert_eq!(m.lambda_min(), 0.0);
        assert_eq!(m.lambda_min_nonzero(), Some(0.02));
    }

    #[test]
    fn random_gram_reconstructs() {
        let mut r = rng(1);
        let a = random_matrix(&mut r, 4, 4);
        let s = a.matmul(&a.transpose());
        let m = eig_decompose(&s, 1e-10).unwrap();
        let err = m.covariance().sub(&s).frobenius_norm() / s.frobenius_norm();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn eig_rejects_bad_input() {
        let asym = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]);
        assert!(matches!(eig_decompose(&asym, 1e-10), Err(SpectraError::NonSymmetric(_))));
        let nan = Matrix::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]]);
        assert_eq!(eig_decompose(&nan, 1e-10), Err(SpectraError::NonFinite));
        let indefinite = Matrix::from_diagonal(&[1.0, -0.5]);
        assert!(matches!(
            eig_decompose(&indefinite, 1e-10),
            Err(SpectraError::NotPositiveSemidefinite(_))
        ));
        let tiny_negative = Matrix::from_diagonal(&[1.0, -1e-12]);
        assert_eq!(eig_decompose(&tiny_negative, 1e-10).unwrap().eigvals, vec![1.0, 0.0]);
    }

    #[test]
    fn two_axis_gradients_give_half_identity() {
        let g = GradientMatrix::new(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        let m = estimate_mean_cov(&g, 1, None).unwrap();
        assert_eq!(m.mean, vec![0.5, 0.5]);
        assert!(m.covariance().sub(&Matrix::identity(2).scale(0.5)).max_abs() < 1e-15);
    }

    #[test]
    fn repeated_gradient_is_rank_one() {
        let g0 = vec![0.3f64, -0.4, 0.5];
        let g = GradientMatrix::new(3, vec![g0.clone(); 7], 1.0).unwrap();
        let batch = 4;
        let m = estimate_mean_cov(&g, batch, None).unwrap();
        assert!(m.mean.iter().zip(&g0).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(m.rank(), 1);
        let mut expected = Matrix::zeros(3, 3);
        expected.add_outer(&g0, 1.0 / batch as f64);
        assert!(m.covariance().sub(&expected).max_abs() < 1e-14);
        let centered = estimate_mean_cov_with(
            &g,
            batch,
            &CovarianceOptions {
                centered: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(centered.lambda_max() < 1e-15);
    }

    #[test]
    fn blockwise_matches_unblocked_sub_blocks() {
        let mut r = rng(5);
        let g = random_gradients(&mut r, 6, 10, 1.5);
        let full = estimate_mean_cov(&g, 3, None).unwrap().covariance();
        let blocks = BlockSpec::even(6, 2).unwrap();
        let bm = estimate_mean_cov(&g, 3, Some(&blocks)).unwrap();
        let bc = bm.covariance();
        for i in 0..6 {
            for j in 0..6 {
                let same_block = (i < 3) == (j < 3);
                let want = if same_block { full[(i, j)] } else { 0.0 };
                assert!((bc[(i, j)] - want).abs() < 1e-12, "({i},{j})");
            }
        }
        assert_eq!(bm.pairs(), 6);
        assert!(bm.eigvals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn estimation_errors() {
        let g = GradientMatrix::<f64>::new(2, vec![], 1.0).unwrap();
        assert_eq!(estimate_mean_cov(&g, 1, None), Err(SpectraError::EmptyGradients));
        let g = GradientMatrix::new(3, vec![vec![0.1, 0.2, 0.3]], 1.0).unwrap();
        let blocks = BlockSpec::even(4, 2).unwrap();
        assert_eq!(
            estimate_mean_cov(&g, 1, Some(&blocks)),
            Err(SpectraError::BlockMismatch { dim: 3 })
        );
        assert!(BlockSpec::new(4, vec![0..2, 3..4]).is_err());
        assert!(BlockSpec::new(4, vec![0..2, 2..2, 2..4]).is_err());
        assert!(GradientMatrix::new(2, vec![vec![3.0, 4.0]], 1.0).is_err());
    }

    #[test]
    fn floor_direct_clipping() {
        let m = eig_decompose(&Matrix::from_diagonal(&[0.5f64, 0.02, 0.0]), 1e-10).unwrap();
        let (floored, delta) = floor_eigenvalues(&m, 0.04).unwrap();
        assert_eq!(floored.eigvals, vec![0.5, 0.04, 0.04]);
        let mut dv = delta.eigvals.clone();
        dv.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((dv[0] - 0.0).abs() < 1e-15 && (dv[1] - 0.02).abs() < 1e-15 && (dv[2] - 0.04).abs() < 1e-15);
        assert!(floored.lambda_min() >= 0.04);
        let diff = floored.covariance().sub(&m.covariance());
        assert!(diff.sub(&delta.covariance()).max_abs() < 1e-15);
    }

    #[test]
    fn floor_noop_and_pure_noise() {
        let m = eig_decompose(&Matrix::from_diagonal(&[0.5, 0.3]), 1e-10).unwrap();
        let (floored, delta) = floor_eigenvalues(&m, 0.1).unwrap();
        assert_eq!(floored.eigvals, m.eigvals);
        assert_eq!(delta.trace(), 0.0);

        let zero = CovarianceModel::<f64>::degenerate(vec![0.0; 5]);
        let (floored, delta) = floor_eigenvalues(&zero, 0.01).unwrap();
        assert!(floored.covariance().sub(&Matrix::identity(5).scale(0.01)).max_abs() < 1e-18);
        assert!((delta.trace() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn floor_requires_full_spectrum() {
        let mut m = CovarianceModel::<f64>::isotropic(vec![0.0; 3], 1.0);
        m.eigvals.truncate(2);
        m.eigvecs = Matrix::from_fn(3, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(
            floor_eigenvalues(&m, 0.1),
            Err(SpectraError::PartialSpectrum { have: 2, dim: 3 })
        );
    }

    #[test]
    fn zero_covariance_sample_is_mean() {
        let m = CovarianceModel::degenerate(vec![1.5, -2.0, 0.25]);
        let x = sample_gaussian(&m, &mut rng(9)).unwrap();
        assert_eq!(x, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn isotropic_sample_covariance() {
        let m = CovarianceModel::isotropic(vec![0.0, 0.0], 1.0);
        let mut r = rng(11);
        let n = 100_000;
        let mut acc = [[0.0f64; 2]; 2];
        for _ in 0..n {
            let x = sample_gaussian(&m, &mut r).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    acc[i][j] += x[i] * x[j];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((acc[i][j] / n as f64 - want).abs() < 0.05);
            }
        }
    }

    #[test]
    fn rank_one_samples_stay_on_line() {
        let g0 = vec![0.6, -0.8, 0.0];
        let gm = GradientMatrix::new(3, vec![g0.clone(); 3], 1.0).unwrap();
        let m = estimate_mean_cov(&gm, 1, None).unwrap().with_mean(vec![1.0, 1.0, 1.0]);
        let mut r = rng(2);
        for _ in 0..100 {
            let x = sample_gaussian(&m, &mut r).unwrap();
            let rel = linalg::sub_vec(&x, &m.mean);
            let t = linalg::dot(&rel, &g0);
            let resid: Vec<f64> = rel.iter().zip(&g0).map(|(a, b)| a - t * b).collect();
            assert!(linalg::norm(&resid) < 1e-10);
        }
    }

    #[test]
    fn sample_rejects_nan() {
        let mut m = CovarianceModel::isotropic(vec![0.0], 1.0);
        m.eigvals[0] = f64::NAN;
        assert_eq!(sample_gaussian(&m, &mut rng(0)), Err(SpectraError::NonFinite));
    }

    #[test]
    fn renyi_simple_cases() {
        let p = CovarianceModel::isotropic(vec![0.3f64, -0.1], 0.7);
        assert!(renyi_gaussian(2.0, &p, &p).unwrap().abs() < 1e-15);
        let a = CovarianceModel::isotropic(vec![1.0f64], 1.0);
        let b = CovarianceModel::isotropic(vec![0.0], 1.0);
        assert!((renyi_gaussian(2.0, &a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn renyi_errors() {
        let p = CovarianceModel::isotropic(vec![0.0], 1.0);
        let q = CovarianceModel::isotropic(vec![0.0], 0.1);
        // (1-α) + α·0.1 < 0 for α = 3.
        assert_eq!(renyi_gaussian(3.0, &p, &q), Err(SpectraError::IndefiniteSigmaAlpha));
        let s = CovarianceModel::degenerate(vec![0.0]);
        assert_eq!(renyi_gaussian(2.0, &p, &s), Err(SpectraError::SingularCovariance));
    }

    #[test]
    fn span_examples() {
        let cols = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert!(!span_contains(&cols, &[0.0, 0.0, 1.0], 1e-9).unwrap());
        assert!(span_contains(&cols, &[1.0, 1.0, 0.0], 1e-9).unwrap());
        assert!(span_contains(&cols, &[0.0, 0.0, 0.0], 1e-9).unwrap());
        assert!(span_contains::<f64>(&[], &[0.0, 0.0], 1e-9).unwrap());
        assert_eq!(
            span_contains(&cols, &[1.0, 0.0], 1e-9),
            Err(SpectraError::DimensionMismatch { expected: 2, got: 3 })
        );
    }

    #[test]
    fn sum_of_models_adds_covariances() {
        let a = CovarianceModel::isotropic(vec![1.0f64, 0.0], 0.5);
        let b = eig_decompose(&Matrix::from_diagonal(&[0.0, 2.0]), 1e-10)
            .unwrap()
            .with_mean(vec![0.0, 1.0]);
        let s = CovarianceModel::sum([&a, &b]).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert!((s.lambda_max() - 2.5).abs() < 1e-14);
        assert!((s.lambda_min() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn works_in_single_precision() {
        let g = GradientMatrix::<f32>::new(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        let m = estimate_mean_cov(&g, 1, None).unwrap();
        assert!((m.lambda_min() - 0.5).abs() < 1e-6);
        let (floored, _) = floor_eigenvalues(&m, 0.75f32).unwrap();
        assert_eq!(floored.lambda_min(), 0.75);
    }
}
