//! Dense small-matrix linear algebra: Gram estimation, exact SVD and
//! symmetric eigendecomposition oracles, orthogonal Procrustes alignment,
//! and column whitening.
//!
//! The decompositions are Jacobi-based and self-contained so they can serve
//! as verification oracles for the optimization engine without relying on an
//! external LAPACK.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension accepted by the exact decomposition oracles.
pub const MAX_ORACLE_DIM: usize = 512;

/// Sweep budget for the Jacobi iterations.
const JACOBI_SWEEPS: usize = 30;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// An `S x L` matrix of L function values evaluated at S sample points.
pub type FunctionBatch = DenseMatrix;

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries ({rows}x{cols})", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Build from a slice of rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    expected: format!("row of length {c}"),
                    got: format!("row of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: format!("{} inner rows", self.cols),
                got: format!("{}", other.rows),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (j, &b_kj) in b_row.iter().enumerate() {
                    out_row[j] += a_ik * b_kj;
                }
            }
        }
        Ok(out)
    }

    /// `A^T A` without forming the transpose.
    pub fn gram(&self) -> DenseMatrix {
        let n = self.cols;
        let mut g = DenseMatrix::zeros(n, n);
        for i in 0..self.rows {
            let row = self.row(i);
            for a in 0..n {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..n {
                    let v = g.get(a, b) + ra * row[b];
                    g.set(a, b, v);
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                g.set(a, b, g.get(b, a));
            }
        }
        g
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = self.clone();
        for (o, &v) in out.data.iter_mut().zip(&other.data) {
            *o -= v;
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Copy of the rows in `range`.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> DenseMatrix {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        DenseMatrix { rows: range.end - range.start, cols: self.cols, data }
    }

    /// Stack `self` on top of `other` (matching column counts).
    pub fn vstack(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} cols", self.cols),
                got: format!("{} cols", other.cols),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        DenseMatrix::new(self.rows + other.rows, self.cols, data)
    }
}

/// Result of an exact singular value decomposition.
///
/// Singular values are non-negative and non-increasing; `left_vectors`
/// (rows x k) and `right_vectors` (cols x k) hold orthonormal columns with
/// `A = U diag(sigma) V^T`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    pub left_vectors: DenseMatrix,
    pub right_vectors: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let m = self.left_vectors.rows();
        let n = self.right_vectors.rows();
        let k = self.singular_values.len();
        DenseMatrix::from_fn(m, n, |i, j| {
            (0..k)
                .map(|l| {
                    self.singular_values[l] * self.left_vectors.get(i, l) * self.right_vectors.get(j, l)
                })
                .sum()
        })
    }
}

fn check_oracle_input(a: &DenseMatrix, tol: f64) -> Result<()> {
    if tol <= 0.0 {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    if a.rows() > MAX_ORACLE_DIM || a.cols() > MAX_ORACLE_DIM {
        return Err(Error::invalid(format!(
            "oracle supports matrices up to {MAX_ORACLE_DIM}x{MAX_ORACLE_DIM}, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if let Some(idx) = a.first_non_finite() {
        return Err(Error::NonFinite { what: "matrix entry".into(), index: idx });
    }
    Ok(())
}

/// Full SVD of a dense matrix via one-sided Jacobi with cyclic sweeps.
///
/// Deterministic up to the sign convention: each left vector's
/// largest-magnitude entry is made positive (the paired right vector is
/// flipped along with it).
pub fn exact_svd(a: &DenseMatrix, tol: f64) -> Result<SvdResult> {
    check_oracle_input(a, tol)?;
    if a.rows() >= a.cols() {
        exact_svd_tall(a, tol)
    } else {
        // Work on the transpose and swap the factors back.
        let r = exact_svd_tall(&a.transpose(), tol)?;
        Ok(SvdResult {
            singular_values: r.singular_values,
            left_vectors: r.right_vectors,
            right_vectors: r.left_vectors,
        })
    }
}

fn exact_svd_tall(a: &DenseMatrix, tol: f64) -> Result<SvdResult> {
    let m = a.rows();
    let n = a.cols();
    // Column-major working copy; one-sided Jacobi orthogonalizes columns.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v = DenseMatrix::identity(n);

    let mut converged = n < 2;
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    alpha += cols[p][i] * cols[p][i];
                    beta += cols[q][i] * cols[q][i];
                    gamma += cols[p][i] * cols[q][i];
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let xp = cols[p][i];
                    let xq = cols[q][i];
                    cols[p][i] = c * xp - s * xq;
                    cols[q][i] = s * xp + c * xq;
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged { sweeps: JACOBI_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let rank_floor = sigma_max * f64::EPSILON * 16.0 * m as f64;

    let mut singular_values = Vec::with_capacity(n);
    let mut u = DenseMatrix::zeros(m, n);
    let mut vs = DenseMatrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        singular_values.push(norms[j]);
        for i in 0..n {
            vs.set(i, k, v.get(i, j));
        }
        if norms[j] > rank_floor {
            for i in 0..m {
                u.set(i, k, cols[j][i] / norms[j]);
            }
        }
    }
    fill_null_columns(&mut u, &singular_values, rank_floor);
    apply_sign_convention(&mut u, Some(&mut vs));
    Ok(SvdResult { singular_values, left_vectors: u, right_vectors: vs })
}

/// Complete columns whose singular value vanished with an orthonormal basis
/// of the remaining space. Columns are sorted by singular value, so every
/// column before `k` is already defined when `k` needs filling.
fn fill_null_columns(u: &mut DenseMatrix, sigma: &[f64], floor: f64) {
    let m = u.rows();
    for k in 0..sigma.len() {
        if sigma[k] > floor {
            continue;
        }
        let mut filled = false;
        for cand in 0..m {
            let mut col = vec![0.0; m];
            col[cand] = 1.0;
            for j in 0..k {
                let dot: f64 = (0..m).map(|i| col[i] * u.get(i, j)).sum();
                for i in 0..m {
                    col[i] -= dot * u.get(i, j);
                }
            }
            let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..m {
                    u.set(i, k, col[i] / norm);
                }
                filled = true;
                break;
            }
        }
        assert!(filled, "could not complete orthonormal basis");
    }
}

/// Make each left vector's largest-magnitude entry positive; flip the paired
/// right vector (or eigenvector) along with it.
fn apply_sign_convention(u: &mut DenseMatrix, mut v: Option<&mut DenseMatrix>) {
    for k in 0..u.cols() {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for i in 0..u.rows() {
            let a = u.get(i, k).abs();
            if a > best_abs + 1e-15 {
                best_abs = a;
                best = i;
            }
        }
        if u.get(best, k) < 0.0 {
            for i in 0..u.rows() {
                u.set(i, k, -u.get(i, k));
            }
            if let Some(vm) = v.as_deref_mut() {
                for i in 0..vm.rows() {
                    vm.set(i, k, -vm.get(i, k));
                }
            }
        }
    }
}

/// Exact eigendecomposition of a symmetric matrix via cyclic Jacobi
/// rotations. Eigenvalues are returned in non-increasing order with
/// orthonormal eigenvectors as the columns of the second output.
pub fn exact_symmetric_eig(a: &DenseMatrix, tol: f64) -> Result<(Vec<f64>, DenseMatrix)> {
    check_oracle_input(a, tol)?;
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::ShapeMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", n, a.cols()),
        });
    }
    let scale = a.max_abs().max(1.0);
    let mut max_dev = 0.0_f64;
    for i in 0..n {
        for j in 0..i {
            max_dev = max_dev.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if max_dev > 1e-12 * scale {
        return Err(Error::Asymmetric { max_dev });
    }

    let mut w = a.clone();
    // Symmetrize exactly so rotations preserve symmetry bit for bit.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (w.get(i, j) + w.get(j, i));
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    let mut v = DenseMatrix::identity(n);

    let mut converged = n < 2;
    for _ in 0..JACOBI_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(w.get(p, q).abs());
            }
        }
        if off <= tol * scale {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = w.get(p, q);
                if apq.abs() <= tol * scale * 1e-3 {
                    continue;
                }
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let wip = w.get(i, p);
                    let wiq = w.get(i, q);
                    w.set(i, p, c * wip - s * wiq);
                    w.set(i, q, s * wip + c * wiq);
                }
                for j in 0..n {
                    let wpj = w.get(p, j);
                    let wqj = w.get(q, j);
                    w.set(p, j, c * wpj - s * wqj);
                    w.set(q, j, s * wpj + c * wqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::NotConverged { sweeps: JACOBI_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w.get(j, j).partial_cmp(&w.get(i, i)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| w.get(i, i)).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, k, v.get(i, j));
        }
    }
    apply_sign_convention(&mut vectors, None);
    Ok((eigenvalues, vectors))
}

/// Result of orthogonal Procrustes alignment.
#[derive(Debug, Clone)]
pub struct ProcrustesResult {
    pub aligned: DenseMatrix,
    pub rotation: DenseMatrix,
    /// Set when the cross-product was rank deficient and the rotation is
    /// only one valid choice among several.
    pub ambiguous: bool,
}

/// Find the orthogonal `rotation` minimizing `||learned * rotation - reference||_F`
/// and return the rotated copy of `learned` along with it.
pub fn procrustes_align(learned: &DenseMatrix, reference: &DenseMatrix) -> Result<ProcrustesResult> {
    if learned.rows() != reference.rows() || learned.cols() != reference.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", learned.rows(), learned.cols()),
            got: format!("{}x{}", reference.rows(), reference.cols()),
        });
    }
    let cross = learned.transpose().matmul(reference)?;
    let svd = exact_svd(&cross, 1e-14)?;
    let k = learned.cols();
    let sigma_max = svd.singular_values.first().copied().unwrap_or(0.0);
    let ambiguous = sigma_max == 0.0
        || svd.singular_values.iter().any(|&s| s <= 1e-12 * sigma_max);
    // Omega* = U V^T from the SVD of learned^T reference.
    let rotation = svd.left_vectors.matmul(&svd.right_vectors.transpose())?;
    debug_assert_eq!(rotation.rows(), k);
    let aligned = learned.matmul(&rotation)?;
    if ambiguous {
        log::warn!(
            "procrustes: rank-deficient cross product (sigma_min/sigma_max <= 1e-12); rotation not unique"
        );
    }
    Ok(ProcrustesResult { aligned, rotation, ambiguous })
}

/// Rescale the columns of `v` so the empirical Gram `(1/S) V^T V` becomes the
/// identity, using the symmetric inverse square root of the Gram.
pub fn whiten_columns(v: &DenseMatrix) -> Result<DenseMatrix> {
    let s = v.rows() as f64;
    let gram = v.gram().scale(1.0 / s);
    let (eigs, q) = exact_symmetric_eig(&gram, 1e-14)?;
    let max_eig = eigs.first().copied().unwrap_or(0.0);
    if let Some(&bad) = eigs.iter().find(|&&e| e <= 1e-12 * max_eig || e <= 0.0) {
        return Err(Error::IllConditioned { eigenvalue: bad });
    }
    // W = Q diag(eig^{-1/2}) Q^T
    let n = eigs.len();
    let w = DenseMatrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| q.get(i, k) * q.get(j, k) / eigs[k].sqrt()).sum()
    });
    v.matmul(&w)
}
