//! Dense real linear algebra: SVD, orthonormalization, projectors, numerical
//! rank, and subspace geometry.
//!
//! Everything is double precision and row-major. Factorizations are delegated
//! to `nalgebra`; the types here are the workspace currency for the rest of
//! the crate.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix data length {got} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row}, {col}) in {rows}x{cols} matrix")]
    NonFinite { rows: usize, cols: usize, row: usize, col: usize },
    #[error("SVD failed to converge for {rows}x{cols} matrix")]
    SvdNonConvergence { rows: usize, cols: usize },
    #[error("basis columns are rank deficient ({cols} columns, rank {rank})")]
    RankDeficientBasis { cols: usize, rank: usize },
}

/// Dense row-major matrix of `f64`.
///
/// Entries are finite by construction; `new` panics on violation and
/// `try_new` reports it, so downstream numerics never see NaN/Inf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data. Panics if the length or finiteness
    /// invariant is violated; use `try_new` for fallible inputs.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        match Self::try_new(rows, cols, data) {
            Ok(m) => m,
            Err(e) => panic!("Matrix::new: {e}"),
        }
    }

    pub fn try_new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength { rows, cols, got: data.len() });
        }
        for (idx, &x) in data.iter().enumerate() {
            if !x.is_finite() {
                return Err(LinalgError::NonFinite {
                    rows,
                    cols,
                    row: idx / cols.max(1),
                    col: idx % cols.max(1),
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// I.i.d. normal(0, std^2) entries from the caller's RNG.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik != 0.0 {
                    let brow = other.row(k);
                    for (j, &bkj) in brow.iter().enumerate() {
                        orow[j] += aik * bkj;
                    }
                }
            }
        }
        Matrix { rows: self.rows, cols: other.cols, data: out }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * c).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "hadamard shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn concat_rows(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "concat_rows column mismatch");
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Matrix { rows: self.rows + other.rows, cols: self.cols, data }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Contiguous block of `len` columns starting at `start`.
    pub fn col_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "col_block out of range");
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Matrix { rows: self.rows, cols: len, data }
    }

    pub fn concat_cols(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "concat_cols row mismatch");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix { rows: self.rows, cols, data }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

}

/// Thin SVD `A = U * diag(S) * Vt` with `S` sorted non-increasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// `U * diag(S) * Vt`, for reconstruction checks.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let mut us = Matrix::zeros(self.u.rows(), k);
        for i in 0..self.u.rows() {
            for j in 0..k {
                us.set(i, j, self.u.get(i, j) * self.s[j]);
            }
        }
        us.matmul(&self.vt)
    }
}

/// Thin SVD of `a` with singular values sorted non-increasing.
pub fn svd(a: &Matrix) -> Result<SvdResult, LinalgError> {
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(a.rows(), 0),
            s: Vec::new(),
            vt: Matrix::zeros(0, a.cols()),
        });
    }
    let na = a.to_na();
    let svd = na
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or(LinalgError::SvdNonConvergence { rows: a.rows(), cols: a.cols() })?;
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let k = svd.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("singular values are finite")
    });

    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].max(0.0)).collect();
    let u_sorted = Matrix::from_fn(u.nrows(), k, |i, j| u[(i, order[j])]);
    let vt_sorted = Matrix::from_fn(k, vt.ncols(), |i, j| vt[(order[i], j)]);
    Ok(SvdResult { u: u_sorted, s, vt: vt_sorted })
}

/// Number of singular values above `max(rows, cols) * sigma_max * 1e-12`.
pub fn numerical_rank(a: &Matrix) -> usize {
    if a.rows() == 0 || a.cols() == 0 {
        return 0;
    }
    let s = svd(a).expect("svd convergence").s;
    let smax = s.first().copied().unwrap_or(0.0);
    let tol = a.rows().max(a.cols()) as f64 * smax * 1e-12;
    s.iter().filter(|&&x| x > tol).count()
}

/// A linear subspace of `R^ambient_dim` stored as an orthonormal column basis.
#[derive(Debug, Clone)]
pub struct Subspace {
    ambient_dim: usize,
    basis: Matrix,
}

impl Subspace {
    /// The trivial zero-dimensional subspace.
    pub fn trivial(ambient_dim: usize) -> Self {
        Self { ambient_dim, basis: Matrix::zeros(ambient_dim, 0) }
    }

    /// Build from linearly independent columns; re-orthonormalizes via QR.
    pub fn from_basis(columns: Matrix) -> Result<Self, LinalgError> {
        let ambient_dim = columns.rows();
        let k = columns.cols();
        if k == 0 {
            return Ok(Self::trivial(ambient_dim));
        }
        let rank = numerical_rank(&columns);
        if rank < k {
            return Err(LinalgError::RankDeficientBasis { cols: k, rank });
        }
        let qr = columns.to_na().qr();
        let q = qr.q();
        let basis = Matrix::from_fn(ambient_dim, k, |i, j| q[(i, j)]);
        Ok(Self { ambient_dim, basis })
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Orthonormal basis of the orthogonal complement.
    pub fn complement(&self) -> Subspace {
        let pi = complement_projector(self);
        span_of_rows(&pi)
    }

    /// Is every basis vector of `self` (numerically) inside `other`?
    pub fn contained_in(&self, other: &Subspace, tol: f64) -> bool {
        assert_eq!(self.ambient_dim, other.ambient_dim);
        let pi = complement_projector(other);
        let residual = pi.matmul(&self.basis);
        residual.frob_norm() <= tol
    }
}

/// Orthonormal basis of the row span of `a`; dimension equals
/// `numerical_rank(a)`.
pub fn span_of_rows(a: &Matrix) -> Subspace {
    let d = a.cols();
    if a.rows() == 0 || d == 0 {
        return Subspace::trivial(d);
    }
    let dec = svd(a).expect("svd convergence");
    let smax = dec.s.first().copied().unwrap_or(0.0);
    let tol = a.rows().max(a.cols()) as f64 * smax * 1e-12;
    let k = dec.s.iter().filter(|&&x| x > tol).count();
    // First k rows of Vt, transposed into d x k columns.
    let basis = Matrix::from_fn(d, k, |i, j| dec.vt.get(j, i));
    Subspace { ambient_dim: d, basis }
}

/// Orthogonal projector onto the complement of `s`: `I - B * B^T`.
pub fn complement_projector(s: &Subspace) -> Matrix {
    let b = s.basis();
    let bbt = b.matmul(&b.transpose());
    Matrix::identity(s.ambient_dim()).sub(&bbt)
}

/// Distance between subspaces: the largest principal angle plus `pi/2` per
/// unit of dimension mismatch. Zero iff the subspaces are identical;
/// symmetric in its arguments.
///
/// The angle is recovered through its sine, `asin(max ||(I - B1 B1^T) b2||)`
/// maximized over both directions. The cosine route through `B1^T B2` loses
/// half the significant digits near zero angle (`acos(1 - eps)` is about
/// `1e-8` at machine precision), which would defeat the equality tolerance
/// the oracles rely on.
pub fn principal_angle_distance(u1: &Subspace, u2: &Subspace) -> f64 {
    assert_eq!(u1.ambient_dim(), u2.ambient_dim(), "ambient dimension mismatch");
    let d1 = u1.dim();
    let d2 = u2.dim();
    let penalty = std::f64::consts::FRAC_PI_2 * d1.abs_diff(d2) as f64;
    if d1.min(d2) == 0 {
        return penalty;
    }
    let sine_of = |a: &Subspace, b: &Subspace| -> f64 {
        let residual = complement_projector(a).matmul(b.basis());
        let s = svd(&residual).expect("svd convergence").s;
        s.first().copied().unwrap_or(0.0)
    };
    let s = sine_of(u1, u2).max(sine_of(u2, u1)).clamp(0.0, 1.0);
    s.asin() + penalty
}

/// Numerical rank with an externally supplied scale: singular values are
/// compared against `max(rows, cols) * sigma_ref * 1e-12`. Needed when the
/// matrix itself may be pure projection noise (e.g. novelty rows after
/// projecting onto a trivial complement), where a relative tolerance would
/// count every noise direction.
pub fn rank_with_reference(a: &Matrix, sigma_ref: f64) -> usize {
    if a.rows() == 0 || a.cols() == 0 || sigma_ref == 0.0 {
        return 0;
    }
    let s = svd(a).expect("svd convergence").s;
    let tol = a.rows().max(a.cols()) as f64 * sigma_ref * 1e-12;
    s.iter().filter(|&&x| x > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn svd_identity_has_unit_singular_values() {
        let dec = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(dec.s.len(), 3);
        for s in dec.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_rank_one_outer_product() {
        // a * u^T with ||a|| = 2, ||u|| = 1 has singular values [2, 0, ...].
        let a = vec![2.0 / 3f64.sqrt(); 3];
        let u = vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0, 0.0];
        let m = Matrix::from_fn(3, 4, |i, j| a[i] * u[j]);
        let dec = svd(&m).unwrap();
        assert!((dec.s[0] - 2.0).abs() < 1e-12);
        for &s in &dec.s[1..] {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn svd_class_indicator_targets() {
        // Targets with n1 = 4 rows equal to e1 and n2 = 3 rows equal to e2
        // have nonzero singular values [sqrt(4), sqrt(3)].
        let d = 6;
        let mut rows = Vec::new();
        for _ in 0..4 {
            rows.push(unit(d, 0));
        }
        for _ in 0..3 {
            rows.push(unit(d, 1));
        }
        let y = Matrix::from_rows(&rows);
        let dec = svd(&y).unwrap();
        assert!((dec.s[0] - 2.0).abs() < 1e-12);
        assert!((dec.s[1] - 3f64.sqrt()).abs() < 1e-12);
        for &s in &dec.s[2..] {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let rows = 1 + (trial * 7) % 64;
            let cols = 1 + (trial * 13) % 64;
            let a = Matrix::gaussian(rows, cols, 1.0, &mut rng);
            let dec = svd(&a).unwrap();
            let err = dec.reconstruct().sub(&a).frob_norm();
            assert!(err <= 1e-10 * a.frob_norm().max(1.0), "reconstruction err {err}");
            for w in dec.s.windows(2) {
                assert!(w[0] >= w[1], "singular values not sorted");
            }
        }
    }

    #[test]
    fn rank_of_zero_and_rank_one() {
        assert_eq!(numerical_rank(&Matrix::zeros(4, 5)), 0);
        let a = vec![1.0, -2.0, 0.5];
        let u = vec![0.3, 0.8, -0.1, 0.4];
        let m = Matrix::from_fn(3, 4, |i, j| a[i] * u[j]);
        assert_eq!(numerical_rank(&m), 1);
    }

    #[test]
    fn rank_of_random_wide_matrix_is_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::gaussian(5, 8, 1.0, &mut rng);
        assert_eq!(numerical_rank(&m), 5);
    }

    #[test]
    fn span_of_rows_with_duplicates() {
        let m = Matrix::from_rows(&[unit(3, 0), unit(3, 0), unit(3, 1)]);
        let s = span_of_rows(&m);
        assert_eq!(s.dim(), 2);
        let e1 = Subspace::from_basis(Matrix::from_fn(3, 1, |i, _| unit(3, 0)[i])).unwrap();
        assert!(e1.contained_in(&s, 1e-10));
    }

    #[test]
    fn span_of_empty_row_set_is_trivial() {
        let s = span_of_rows(&Matrix::zeros(0, 5));
        assert_eq!(s.dim(), 0);
        assert_eq!(s.ambient_dim(), 5);
    }

    #[test]
    fn complement_projector_of_e1() {
        let e1 = Subspace::from_basis(Matrix::from_fn(3, 1, |i, _| unit(3, 0)[i])).unwrap();
        let pi = complement_projector(&e1);
        let expect = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert!(pi.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn complement_projector_of_full_space_is_zero() {
        let s = Subspace::from_basis(Matrix::identity(4)).unwrap();
        let pi = complement_projector(&s);
        assert!(pi.max_abs() < 1e-12);
    }

    #[test]
    fn projector_trace_equals_codimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cols = Matrix::gaussian(6, 2, 1.0, &mut rng);
        let s = Subspace::from_basis(cols).unwrap();
        let pi = complement_projector(&s);
        let trace: f64 = (0..6).map(|i| pi.get(i, i)).sum();
        assert!((trace - 4.0).abs() < 1e-10);
    }

    #[test]
    fn projector_idempotent_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cols = Matrix::gaussian(8, 3, 1.0, &mut rng);
            let s = Subspace::from_basis(cols).unwrap();
            let pi = complement_projector(&s);
            assert!(pi.matmul(&pi).sub(&pi).frob_norm() <= 1e-10);
            assert!(pi.sub(&pi.transpose()).frob_norm() <= 1e-10);
            // Projector annihilates every basis column.
            let pb = pi.matmul(s.basis());
            assert!(pb.frob_norm() <= 1e-10);
        }
    }

    #[test]
    fn principal_angle_examples() {
        let e = |i: usize| Subspace::from_basis(Matrix::from_fn(3, 1, |r, _| unit(3, i)[r])).unwrap();
        let diag = Subspace::from_basis(Matrix::from_fn(3, 1, |r, _| {
            [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0][r]
        }))
        .unwrap();
        assert!(principal_angle_distance(&e(0), &e(0)) < 1e-12);
        assert!((principal_angle_distance(&e(0), &e(1)) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((principal_angle_distance(&e(0), &diag) - std::f64::consts::FRAC_PI_4).abs() < 1e-10);
    }

    #[test]
    fn principal_angle_dimension_mismatch_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s1 = Subspace::from_basis(Matrix::gaussian(5, 1, 1.0, &mut rng)).unwrap();
        let s2 = Subspace::from_basis(Matrix::gaussian(5, 3, 1.0, &mut rng)).unwrap();
        let d12 = principal_angle_distance(&s1, &s2);
        let d21 = principal_angle_distance(&s2, &s1);
        assert!(d12 > 1e-8);
        assert!((d12 - d21).abs() < 1e-12);
    }

    #[test]
    fn rank_subadditivity_under_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let t = 1 + rng.gen_range(0..4usize);
            let r = 1 + rng.gen_range(0..4usize);
            let a = Matrix::gaussian(6, t, 1.0, &mut rng).matmul(&Matrix::gaussian(t, 7, 1.0, &mut rng));
            let b = Matrix::gaussian(7, r, 1.0, &mut rng).matmul(&Matrix::gaussian(r, 5, 1.0, &mut rng));
            let prod_rank = numerical_rank(&a.matmul(&b));
            assert!(prod_rank <= numerical_rank(&a).min(numerical_rank(&b)));
        }
    }

    #[test]
    fn try_new_rejects_non_finite() {
        let err = Matrix::try_new(1, 2, vec![1.0, f64::NAN]);
        assert!(matches!(err, Err(LinalgError::NonFinite { .. })));
        let err = Matrix::try_new(2, 2, vec![1.0]);
        assert!(matches!(err, Err(LinalgError::BadLength { .. })));
    }
}
