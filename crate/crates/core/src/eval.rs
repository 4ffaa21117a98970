//! Quantitative measures for learned singular/eigen functions: Rayleigh
//! quotients, relative eigenvalue errors, spectrum estimates from norms,
//! Procrustes-aligned angle distances, subspace distances, orthogonality
//! error, Nystrom extension, and Rayleigh-Ritz refinement.
//!
//! All inner products here are plain empirical means `(1/S) sum_b ...`;
//! callers evaluating under a test sampler fold the `w_tr/w_te` importance
//! ratio into the value matrices first (see [`apply_row_scaling`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    exact_symmetric_eig, procrustes_align, whiten_columns, DenseMatrix, FunctionBatch,
};

/// Norm threshold below which a mode counts as collapsed (zero function).
pub const COLLAPSE_NORM: f64 = 1e-8;

/// Ordered partition of mode indices sharing a ground-truth eigenvalue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegeneracyGrouping {
    pub groups: Vec<Vec<usize>>,
}

impl DegeneracyGrouping {
    /// Singleton groups for a spectrum without degeneracies.
    pub fn singletons(l: usize) -> Self {
        Self { groups: (0..l).map(|i| vec![i]).collect() }
    }

    /// Group consecutive modes whose truth eigenvalues agree within `tol`.
    pub fn from_eigenvalues(values: &[f64], tol: f64) -> Self {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if (values[g[0]] - v).abs() <= tol => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        Self { groups }
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        let mut seen = vec![false; l];
        for g in &self.groups {
            for &i in g {
                if i >= l || seen[i] {
                    return Err(Error::invalid(format!(
                        "grouping is not a partition of 0..{l}: index {i} repeated or out of range"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid(format!("grouping does not cover all {l} modes")));
        }
        Ok(())
    }

    pub fn group_of(&self, mode: usize) -> usize {
        self.groups.iter().position(|g| g.contains(&mode)).unwrap_or(usize::MAX)
    }
}

/// Per-mode Rayleigh quotients `<f|Tf> / <f|f>`; `None` marks a collapsed
/// mode (empirical norm below [`COLLAPSE_NORM`]).
pub fn rayleigh_quotient(f_values: &FunctionBatch, t_values: &FunctionBatch) -> Result<Vec<Option<f64>>> {
    rayleigh_quotient_weighted(f_values, t_values, None)
}

/// Importance-weighted Rayleigh quotients; `weights[b]` carries the
/// evaluation ratio `w_tr(x_b)/w_te(x_b)`.
pub fn rayleigh_quotient_weighted(
    f_values: &FunctionBatch,
    t_values: &FunctionBatch,
    weights: Option<&[f64]>,
) -> Result<Vec<Option<f64>>> {
    let s = f_values.rows();
    let l = f_values.cols();
    if t_values.rows() != s || t_values.cols() != l {
        return Err(Error::ShapeMismatch {
            expected: format!("{s}x{l}"),
            got: format!("{}x{}", t_values.rows(), t_values.cols()),
        });
    }
    let mut out = Vec::with_capacity(l);
    for m in 0..l {
        let mut num = 0.0;
        let mut den = 0.0;
        for b in 0..s {
            let w = weights.map_or(1.0, |w| w[b]);
            let fv = f_values.get(b, m);
            num += w * fv * t_values.get(b, m);
            den += w * fv * fv;
        }
        num /= s as f64;
        den /= s as f64;
        if den.sqrt() < COLLAPSE_NORM {
            out.push(None);
        } else {
            out.push(Some(num / den));
        }
    }
    Ok(out)
}

/// Absolute relative error in percent, defined for positive eigenvalues.
pub fn relative_eigenvalue_error(estimate: f64, truth: f64) -> Result<f64> {
    if truth <= 0.0 {
        return Err(Error::invalid(format!(
            "relative eigenvalue error is defined for positive eigenvalues, got {truth}"
        )));
    }
    Ok((estimate - truth).abs() / truth * 100.0)
}

/// Singular value estimates from the scaled-function property:
/// `sigma_l = sqrt(E[f_l^2] E[g_l^2])`. For EVD pass `f` for both sides;
/// the product of identical norms collapses to the eigenvalue estimate
/// `E[f_l^2]`.
pub fn spectrum_from_norms(f_values: &FunctionBatch, g_values: &FunctionBatch) -> Result<Vec<f64>> {
    let l = f_values.cols();
    if g_values.cols() != l {
        return Err(Error::ShapeMismatch {
            expected: format!("{l} modes"),
            got: format!("{}", g_values.cols()),
        });
    }
    let sf = f_values.rows() as f64;
    let sg = g_values.rows() as f64;
    let mut out = Vec::with_capacity(l);
    for m in 0..l {
        let nf: f64 = (0..f_values.rows()).map(|b| f_values.get(b, m).powi(2)).sum::<f64>() / sf;
        let ng: f64 = (0..g_values.rows()).map(|b| g_values.get(b, m).powi(2)).sum::<f64>() / sg;
        out.push((nf * ng).sqrt());
    }
    Ok(out)
}

/// Normalize every column to unit empirical norm `(1/S) sum v^2 = 1`.
/// Columns below the collapse threshold are left untouched.
pub fn normalize_columns(v: &FunctionBatch) -> FunctionBatch {
    let s = v.rows() as f64;
    let mut out = v.clone();
    for m in 0..v.cols() {
        let norm = ((0..v.rows()).map(|b| v.get(b, m).powi(2)).sum::<f64>() / s).sqrt();
        if norm > COLLAPSE_NORM {
            for b in 0..v.rows() {
                out.set(b, m, out.get(b, m) / norm);
            }
        }
    }
    out
}

/// Fold per-row scale factors into a value matrix (evaluation-time
/// importance adjustment).
pub fn apply_row_scaling(v: &FunctionBatch, scales: &[f64]) -> FunctionBatch {
    let mut out = v.clone();
    for b in 0..v.rows() {
        let w = scales[b];
        for x in out.row_mut(b) {
            *x *= w;
        }
    }
    out
}

/// Normalized angle distance `(2/pi) arccos |<psi|psi_bar>|` per mode after
/// per-degenerate-group orthogonal Procrustes alignment. Both sets must be
/// normalized to unit empirical norm.
pub fn angle_distance(
    learned: &FunctionBatch,
    truth: &FunctionBatch,
    grouping: &DegeneracyGrouping,
) -> Result<Vec<f64>> {
    let s = learned.rows();
    let l = learned.cols();
    if truth.rows() != s || truth.cols() != l {
        return Err(Error::ShapeMismatch {
            expected: format!("{s}x{l}"),
            got: format!("{}x{}", truth.rows(), truth.cols()),
        });
    }
    grouping.validate(l)?;
    let mut out = vec![0.0; l];
    for group in &grouping.groups {
        let k = group.len();
        let sub_learned = DenseMatrix::from_fn(s, k, |b, j| learned.get(b, group[j]));
        let sub_truth = DenseMatrix::from_fn(s, k, |b, j| truth.get(b, group[j]));
        let aligned = if k == 1 {
            sub_learned.clone()
        } else {
            procrustes_align(&sub_learned, &sub_truth)?.aligned
        };
        for (j, &mode) in group.iter().enumerate() {
            let mut dot = 0.0;
            for b in 0..s {
                dot += aligned.get(b, j) * sub_truth.get(b, j);
            }
            dot /= s as f64;
            let c = dot.abs().min(1.0);
            out[mode] = 2.0 / std::f64::consts::PI * c.acos();
        }
    }
    Ok(out)
}

/// Normalized subspace distance `1 - tr(P Q)/K` between the column spans of
/// `a` and `b`; 0 iff equal spans, 1 iff orthogonal spans. Exactly symmetric
/// in its arguments.
pub fn subspace_distance(a: &FunctionBatch, b: &FunctionBatch) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.rows(), a.cols()),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    let k = a.cols();
    let s = a.rows() as f64;
    let aw = whiten_columns(a).map_err(rank_error)?;
    let bw = whiten_columns(b).map_err(rank_error)?;
    // tr(P Q) = (1/S^2) ||A_w^T B_w||_F^2 for empirically orthonormal bases.
    let cross = aw.transpose().matmul(&bw)?;
    let tr = cross.data().iter().map(|v| v * v).sum::<f64>() / (s * s);
    Ok(1.0 - tr / k as f64)
}

fn rank_error(e: Error) -> Error {
    match e {
        Error::IllConditioned { eigenvalue } => Error::Numerical(format!(
            "rank-deficient basis: smallest Gram eigenvalue {eigenvalue:e}"
        )),
        other => other,
    }
}

/// Orthogonality error `(1/L^2) sum_{ll'} (<f_l|f_l'> - delta_{ll'})^2`
/// (zero iff the empirical Gram is the identity).
pub fn orthogonality_error(f_values: &FunctionBatch) -> f64 {
    let l = f_values.cols();
    let gram = f_values.gram().scale(1.0 / f_values.rows() as f64);
    let mut acc = 0.0;
    for i in 0..l {
        for j in 0..l {
            let d = gram.get(i, j) - if i == j { 1.0 } else { 0.0 };
            acc += d * d;
        }
    }
    acc / (l * l) as f64
}

/// Nystrom out-of-sample extension
/// `phi_l(x) = (1/(sigma_l N)) sum_j k(x, y_j) v_l(y_j)` from a right
/// singular vector in the `V^T V = N I` normalization.
pub fn nystrom_extend<K>(
    kernel: K,
    train_points: &DenseMatrix,
    right_vector: &[f64],
    sigma: f64,
    query: &[f64],
) -> Result<f64>
where
    K: Fn(&[f64], &[f64]) -> f64,
{
    let n = train_points.rows();
    if right_vector.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} vector entries"),
            got: format!("{}", right_vector.len()),
        });
    }
    if sigma <= 1e-10 {
        return Err(Error::TinySingularValue { mode: 0, sigma });
    }
    let mut acc = 0.0;
    for j in 0..n {
        acc += kernel(query, train_points.row(j)) * right_vector[j];
    }
    Ok(acc / (sigma * n as f64))
}

/// Rayleigh-Ritz refinement: project the operator onto an empirically
/// orthonormal basis, `B_ij = <phi_i | T phi_j>`, solve the d x d
/// eigenproblem, and return Ritz pairs sorted by descending value.
pub fn rayleigh_ritz(
    basis_values: &FunctionBatch,
    t_basis_values: &FunctionBatch,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let s = basis_values.rows();
    let d = basis_values.cols();
    if t_basis_values.rows() != s || t_basis_values.cols() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("{s}x{d}"),
            got: format!("{}x{}", t_basis_values.rows(), t_basis_values.cols()),
        });
    }
    let mut b = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..s {
                acc += basis_values.get(r, i) * t_basis_values.get(r, j);
            }
            b.set(i, j, acc / s as f64);
        }
    }
    // The projected matrix of a self-adjoint operator is symmetric up to
    // Monte-Carlo error; symmetrize, warning when the error is large.
    let mut max_dev = 0.0_f64;
    for i in 0..d {
        for j in 0..i {
            max_dev = max_dev.max((b.get(i, j) - b.get(j, i)).abs());
        }
    }
    if max_dev > 1e-8 {
        log::warn!("rayleigh-ritz: projected matrix asymmetric by {max_dev:e}; symmetrizing");
    }
    let sym = DenseMatrix::from_fn(d, d, |i, j| 0.5 * (b.get(i, j) + b.get(j, i)));
    let (values, vectors) = exact_symmetric_eig(&sym, 1e-13)?;
    Ok((values, vectors))
}

/// Full evaluation summary for a trained run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Rayleigh quotients (EVD) or norm-product estimates (SVD) per mode;
    /// `None` marks a collapsed mode.
    pub eigenvalue_estimates: Vec<Option<f64>>,
    /// Percent errors against positive ground-truth eigenvalues.
    pub relative_errors_pct: Vec<Option<f64>>,
    pub angle_distances: Vec<Option<f64>>,
    /// One distance per degenerate group, indexed like `grouping.groups`.
    pub subspace_distances: Vec<Option<f64>>,
    pub orthogonality_error: f64,
    /// `sigma_l = sqrt(E[f^2] E[g^2])` per mode.
    pub norm_spectrum: Vec<f64>,
    pub grouping: DegeneracyGrouping,
    pub collapsed_modes: Vec<usize>,
}

impl EvalReport {
    /// CSV with one row per mode and a trailing run-level row carrying the
    /// orthogonality error.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from(
            "mode,eigenvalue_estimate,relative_error_pct,angle_distance,norm_sigma,group_id,subspace_distance,orthogonality_error\n",
        );
        for m in 0..self.norm_spectrum.len() {
            let gid = self.grouping.group_of(m);
            let sub = self.subspace_distances.get(gid).cloned().flatten();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},\n",
                m,
                fmt(self.eigenvalue_estimates.get(m).cloned().flatten()),
                fmt(self.relative_errors_pct.get(m).cloned().flatten()),
                fmt(self.angle_distances.get(m).cloned().flatten()),
                self.norm_spectrum[m],
                gid,
                fmt(sub),
            ));
        }
        out.push_str(&format!("all,,,,,,,{}\n", self.orthogonality_error));
        out
    }
}
