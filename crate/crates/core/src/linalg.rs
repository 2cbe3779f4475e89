//! Small dense linear algebra: a row-major matrix, cyclic Jacobi
//! eigendecomposition for symmetric matrices, Cholesky factorisation and a
//! one-sided Jacobi SVD used for span tests.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Panics if the rows are ragged.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Builds a `rows x cols.len()` matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, cols: &[Vec<T>]) -> Self {
        let mut m = Self::zeros(rows, cols.len());
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), rows, "column length mismatch");
            for (i, &v) in col.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "mul_vec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    /// `self += s * v vᵀ`
    pub fn add_outer(&mut self, v: &[T], s: T) {
        assert!(self.is_square() && self.rows == v.len());
        let n = self.rows;
        for i in 0..n {
            let vi = v[i] * s;
            if vi == T::zero() {
                continue;
            }
            for j in 0..n {
                self.data[i * n + j] += vi * v[j];
            }
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &a| acc.max(a.abs()))
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).fold(T::zero(), |acc, i| acc + self[(i, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Largest |A_ij - A_ji|.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn symmetrized(&self) -> Self {
        let half = T::of(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)]) * half)
    }

    /// Copy of the sub-block `rows x cols` starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += s * x`
pub fn axpy<T: Scalar>(y: &mut [T], s: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn sub_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns eigenvalues in non-increasing order and the matching orthonormal
/// eigenvectors as columns. Only the upper triangle's symmetric part matters;
/// callers validate symmetry beforehand.
pub fn symmetric_eigen<T: Scalar>(m: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    assert!(m.is_square(), "eigendecomposition needs a square matrix");
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let tiny = T::epsilon() * T::epsilon();

    for _ in 0..MAX_SWEEPS {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off == T::zero() || off.sqrt() <= tiny * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Skip rotations that cannot change the diagonal in working precision.
                if apq.abs() <= tiny * (app.abs() + aqq.abs()) {
                    a[(p, q)] = T::zero();
                    a[(q, p)] = T::zero();
                    continue;
                }
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = if theta.abs() > T::of(1e15) {
                    T::one() / (T::of(2.0) * theta)
                } else {
                    let sign = if theta < T::zero() { -T::one() } else { T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Lower-triangular Cholesky factor, or `None` if the matrix is not
/// numerically positive definite.
pub fn cholesky<T: Scalar>(m: &Matrix<T>) -> Option<Matrix<T>> {
    assert!(m.is_square());
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower<T: Scalar>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut x = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// `ln |A|` from the Cholesky factor of `A`.
pub fn log_det_cholesky<T: Scalar>(l: &Matrix<T>) -> T {
    (0..l.rows()).fold(T::zero(), |acc, i| acc + l[(i, i)].ln()) * T::of(2.0)
}

/// One-sided Jacobi SVD of the `m x n` matrix whose columns are `cols`.
///
/// Returns `(singular_values, left_vectors)` sorted by non-increasing singular
/// value. Left vectors are only meaningful for non-zero singular values; for
/// zero columns a zero vector is returned.
pub fn column_svd<T: Scalar>(m: usize, cols: &[Vec<T>]) -> (Vec<T>, Vec<Vec<T>>) {
    let mut a: Vec<Vec<T>> = cols.to_vec();
    let n = a.len();
    let eps = T::epsilon();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let sign = if zeta < T::zero() { -T::one() } else { T::one() };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let x = a[i][k];
                    let y = a[j][k];
                    a[i][k] = c * x - s * y;
                    a[j][k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut pairs: Vec<(T, Vec<T>)> = a
        .into_iter()
        .map(|col| {
            let s = norm(&col);
            let u = if s > T::zero() {
                col.iter().map(|&x| x / s).collect()
            } else {
                vec![T::zero(); m]
            };
            (s, u)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal));
    pairs.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn jacobi_reconstructs_random_gram_matrices() {
        let mut seed = 17u64;
        for n in 1..8 {
            let a = Matrix::from_fn(n, n, |_, _| lcg(&mut seed));
            let s = a.matmul(&a.transpose());
            let (vals, vecs) = symmetric_eigen(&s);
            let rec = vecs
                .matmul(&Matrix::from_diagonal(&vals))
                .matmul(&vecs.transpose());
            assert!(rec.sub(&s).frobenius_norm() <= 1e-12 * s.frobenius_norm().max(1.0));
            let gram = vecs.transpose().matmul(&vecs);
            assert!(gram.sub(&Matrix::identity(n)).max_abs() < 1e-12);
            assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(cholesky(&m).is_none());
        let pd = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky(&pd).unwrap();
        assert!(l.matmul(&l.transpose()).sub(&pd).max_abs() < 1e-14);
        assert!((log_det_cholesky(&l) - 8.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn column_svd_singular_values_match_eigenvalues() {
        let mut seed = 3u64;
        let cols: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| lcg(&mut seed)).collect()).collect();
        let (s, _) = column_svd(3, &cols);
        let a = Matrix::from_columns(3, &cols);
        let (vals, _) = symmetric_eigen(&a.matmul(&a.transpose()));
        for k in 0..3 {
            assert!((s[k] * s[k] - vals[k]).abs() < 1e-12);
        }
        assert!(s[3] < 1e-7 && s[4] < 1e-7);
    }
}
