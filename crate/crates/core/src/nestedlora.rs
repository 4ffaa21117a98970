//! Objective and gradient engine for nested low-rank approximation.
//!
//! The engine works entirely in per-sample cotangents (S x L arrays) that
//! are handed to `model_backward`; every operator backend shares this
//! interface. Nesting (sequential or joint) enters only through a vector
//! mask `m` and a matrix mask `M`: the one-shot objective is
//!
//! ```text
//! L = -2 sum_l m_l <g_l|T f_l> + sum_{l,l'} M_{ll'} <f_l|f_l'> <g_l|g_l'>
//! ```
//!
//! and the functional gradient with respect to `f_l` is
//! `2 { -m_l |T* g_l> + sum_i M_{il} |f_i> <g_i|g_l> }`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, FunctionBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Weighted sum of all prefix objectives; one-shot masks.
    Joint,
    /// Per-mode masked gradients; recovers the sequential update.
    Sequential,
    /// Plain low-rank approximation: subspace only, no ordering.
    None,
}

/// Vector mask `m` and matrix mask `M` selecting the nesting flavor.
#[derive(Debug, Clone, PartialEq)]
pub struct NestingMasks {
    pub vector: Vec<f64>,
    pub matrix: DenseMatrix,
    pub mode: MaskMode,
    /// Set when a constant first mode was prepended for CDK decomposition.
    pub first_mode_const: bool,
}

impl NestingMasks {
    /// Number of masked modes (includes the constant mode when padded).
    pub fn modes(&self) -> usize {
        self.vector.len()
    }
}

/// Joint-nesting masks for positive weights `w`: `m_l = sum_{i>=l} w_i`,
/// `M_{ij} = m_{max(i,j)}`. With `set_first_mode_const` the first entry is
/// duplicated for the fictitious constant mode and `M` is rebuilt at
/// (L+1)^2.
pub fn joint_masks(weights: &[f64], set_first_mode_const: bool) -> Result<NestingMasks> {
    if weights.is_empty() {
        return Err(Error::invalid("need at least one weight"));
    }
    if let Some(&w) = weights.iter().find(|&&w| !(w > 0.0)) {
        return Err(Error::invalid(format!("weights must be positive, got {w}")));
    }
    let l = weights.len();
    let mut suffix = vec![0.0; l];
    let mut acc = 0.0;
    for i in (0..l).rev() {
        acc += weights[i];
        suffix[i] = acc;
    }
    let mut vector = suffix;
    if set_first_mode_const {
        let mut padded = Vec::with_capacity(l + 1);
        padded.push(vector[0]);
        padded.extend_from_slice(&vector);
        vector = padded;
    }
    let n = vector.len();
    let matrix = DenseMatrix::from_fn(n, n, |i, j| vector[i].min(vector[j]));
    Ok(NestingMasks {
        vector,
        matrix,
        mode: MaskMode::Joint,
        first_mode_const: set_first_mode_const,
    })
}

/// Sequential-nesting masks: `m = 1`, `M` upper-triangular ones
/// (`M_{il} = 1{i <= l}`).
pub fn sequential_masks(l: usize, set_first_mode_const: bool) -> Result<NestingMasks> {
    if l == 0 {
        return Err(Error::invalid("need at least one mode"));
    }
    let n = if set_first_mode_const { l + 1 } else { l };
    let vector = vec![1.0; n];
    let matrix = DenseMatrix::from_fn(n, n, |i, j| if i <= j { 1.0 } else { 0.0 });
    Ok(NestingMasks {
        vector,
        matrix,
        mode: MaskMode::Sequential,
        first_mode_const: set_first_mode_const,
    })
}

/// No nesting: plain LoRA masks (all ones).
pub fn no_nesting_masks(l: usize, set_first_mode_const: bool) -> Result<NestingMasks> {
    if l == 0 {
        return Err(Error::invalid("need at least one mode"));
    }
    let n = if set_first_mode_const { l + 1 } else { l };
    Ok(NestingMasks {
        vector: vec![1.0; n],
        matrix: DenseMatrix::from_fn(n, n, |_, _| 1.0),
        mode: MaskMode::None,
        first_mode_const: set_first_mode_const,
    })
}

pub fn masks_for(
    mode: MaskMode,
    weights: &[f64],
    set_first_mode_const: bool,
) -> Result<NestingMasks> {
    match mode {
        MaskMode::Joint => joint_masks(weights, set_first_mode_const),
        MaskMode::Sequential => sequential_masks(weights.len(), set_first_mode_const),
        MaskMode::None => no_nesting_masks(weights.len(), set_first_mode_const),
    }
}

/// Empirical Gram estimate `(1/B) sum_b f_l(x_b) f_l'(x_b)`; unbiased for
/// `<f_l|f_l'>` under the sampling measure.
pub fn compute_lambda(v: &FunctionBatch) -> DenseMatrix {
    v.gram().scale(1.0 / v.rows() as f64)
}

/// Gram estimate with per-row weights (weights must sum to the total mass,
/// typically 1 for a probability-weighted population).
pub fn compute_lambda_weighted(v: &FunctionBatch, weights: &[f64]) -> DenseMatrix {
    let l = v.cols();
    let mut g = DenseMatrix::zeros(l, l);
    for b in 0..v.rows() {
        let row = v.row(b);
        let w = weights[b];
        for i in 0..l {
            let wi = w * row[i];
            for j in i..l {
                let val = g.get(i, j) + wi * row[j];
                g.set(i, j, val);
            }
        }
    }
    for i in 0..l {
        for j in 0..i {
            g.set(i, j, g.get(j, i));
        }
    }
    g
}

/// Metric term `sum_{ll'} M_{ll'} (Lambda_f)_{ll'} (Lambda_g)_{ll'}`.
pub fn metric_loss(masks: &NestingMasks, lambda_f: &DenseMatrix, lambda_g: &DenseMatrix) -> f64 {
    let n = masks.modes();
    debug_assert_eq!(lambda_f.rows(), n);
    debug_assert_eq!(lambda_g.rows(), n);
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += masks.matrix.get(i, j) * lambda_f.get(i, j) * lambda_g.get(i, j);
        }
    }
    acc
}

/// Loss value split into its operator and metric halves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub operator_term: f64,
    pub metric_term: f64,
    /// Raw per-mode `<g_l|T f_l>` estimates (before masking).
    pub per_mode_operator: Vec<f64>,
}

/// One-shot nested objective from per-mode operator-term estimates and Gram
/// estimates. With all-ones masks this is exactly the plain LoRA objective.
pub fn nested_objective(
    masks: &NestingMasks,
    operator_terms: &[f64],
    lambda_f: &DenseMatrix,
    lambda_g: &DenseMatrix,
) -> Result<LossReport> {
    let n = masks.modes();
    if operator_terms.len() != n || lambda_f.rows() != n || lambda_g.rows() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} modes"),
            got: format!(
                "{} operator terms, {}x{} lambda_f, {}x{} lambda_g",
                operator_terms.len(),
                lambda_f.rows(),
                lambda_f.cols(),
                lambda_g.rows(),
                lambda_g.cols()
            ),
        });
    }
    let operator_term: f64 =
        -2.0 * masks.vector.iter().zip(operator_terms).map(|(m, t)| m * t).sum::<f64>();
    let metric_term = metric_loss(masks, lambda_f, lambda_g);
    Ok(LossReport {
        total: operator_term + metric_term,
        operator_term,
        metric_term,
        per_mode_operator: operator_terms.to_vec(),
    })
}

/// Per-sample cotangents of the nested objective:
///
/// ```text
/// df[b,l] = (2/S_f) ( -m_l t_adjoint[b,l] + sum_i M_{il} f[b,i] lambda_g[i,l] )
/// dg[b,l] = (2/S_g) ( -m_l t_forward[b,l] + sum_i M_{il} g[b,i] lambda_f[i,l] )
/// ```
///
/// `t_forward` holds `(T f_l)(y_b)` on the g side and `t_adjoint` holds
/// `(T* g_l)(x_b)` on the f side. The Gram estimates must come from batches
/// independent of the ones carrying `f_values`/`g_values` (see
/// [`batch_split`]); feeding df/dg to `model_backward` then gives an
/// unbiased estimate of the parameter gradient of the population objective.
#[allow(clippy::too_many_arguments)]
pub fn nestedlora_cotangents(
    masks: &NestingMasks,
    f_values: &FunctionBatch,
    g_values: &FunctionBatch,
    t_forward: &FunctionBatch,
    t_adjoint: &FunctionBatch,
    lambda_f_indep: &DenseMatrix,
    lambda_g_indep: &DenseMatrix,
) -> Result<(FunctionBatch, FunctionBatch)> {
    let n = masks.modes();
    for (name, m, rows) in [
        ("f_values", f_values, f_values.rows()),
        ("g_values", g_values, g_values.rows()),
        ("t_forward", t_forward, g_values.rows()),
        ("t_adjoint", t_adjoint, f_values.rows()),
    ] {
        if m.rows() != rows || m.cols() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{n} {name}"),
                got: format!("{}x{}", m.rows(), m.cols()),
            });
        }
    }
    if lambda_f_indep.rows() != n || lambda_g_indep.rows() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n}x{n} gram estimates"),
            got: format!("{}x{}", lambda_f_indep.rows(), lambda_g_indep.rows()),
        });
    }
    let df = cotangent_side(masks, f_values, t_adjoint, lambda_g_indep);
    let dg = cotangent_side(masks, g_values, t_forward, lambda_f_indep);
    Ok((df, dg))
}

/// Weighted-population variant: row `b` carries probability mass
/// `weights[b]` instead of `1/S`.
#[allow(clippy::too_many_arguments)]
pub fn nestedlora_cotangents_weighted(
    masks: &NestingMasks,
    f_values: &FunctionBatch,
    g_values: &FunctionBatch,
    t_forward: &FunctionBatch,
    t_adjoint: &FunctionBatch,
    lambda_f: &DenseMatrix,
    lambda_g: &DenseMatrix,
    weights: &[f64],
) -> Result<(FunctionBatch, FunctionBatch)> {
    let (mut df, mut dg) =
        nestedlora_cotangents(masks, f_values, g_values, t_forward, t_adjoint, lambda_f, lambda_g)?;
    let sf = f_values.rows() as f64;
    let sg = g_values.rows() as f64;
    for b in 0..df.rows() {
        let w = weights[b] * sf;
        for v in df.row_mut(b) {
            *v *= w;
        }
    }
    for b in 0..dg.rows() {
        let w = weights[b] * sg;
        for v in dg.row_mut(b) {
            *v *= w;
        }
    }
    Ok((df, dg))
}

fn cotangent_side(
    masks: &NestingMasks,
    values: &FunctionBatch,
    t_other: &FunctionBatch,
    lambda_other: &DenseMatrix,
) -> FunctionBatch {
    let s = values.rows();
    let n = masks.modes();
    let scale = 2.0 / s as f64;
    let mut out = DenseMatrix::zeros(s, n);
    // Precontract M with the Gram estimate: C[i,l] = M_{il} * lambda[i,l].
    let coupling =
        DenseMatrix::from_fn(n, n, |i, l| masks.matrix.get(i, l) * lambda_other.get(i, l));
    for b in 0..s {
        let vrow = values.row(b);
        let trow = t_other.row(b);
        let orow = out.row_mut(b);
        for l in 0..n {
            let mut acc = -masks.vector[l] * trow[l];
            for (i, &vi) in vrow.iter().enumerate() {
                acc += vi * coupling.get(i, l);
            }
            orow[l] = scale * acc;
        }
    }
    out
}

/// Deterministic disjoint halves of a batch: `{0..S/2}` and `{S/2..S}`.
/// Gram estimates from one half paired with gradient-carrying values from
/// the other keep the product estimator unbiased.
pub fn batch_split(s: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    if s % 2 != 0 {
        return Err(Error::invalid(format!(
            "batch size {s} is odd; batch splitting requires even batch sizes"
        )));
    }
    if s < 4 {
        return Err(Error::invalid(format!("batch size {s} too small to split (need >= 4)")));
    }
    Ok((0..s / 2, s / 2..s))
}

/// Split-batch cotangents: rows in each half consume the opposite half's
/// Gram estimate while the operator pull spans the full batch, all under a
/// single uniform `1/S` normalization.
pub fn nestedlora_cotangents_split(
    masks: &NestingMasks,
    f_values: &FunctionBatch,
    g_values: &FunctionBatch,
    t_forward: &FunctionBatch,
    t_adjoint: &FunctionBatch,
) -> Result<(FunctionBatch, FunctionBatch)> {
    let (fa, fb) = batch_split(f_values.rows())?;
    let (ga, gb) = batch_split(g_values.rows())?;
    let lam_f_a = compute_lambda(&f_values.slice_rows(fa.clone()));
    let lam_f_b = compute_lambda(&f_values.slice_rows(fb.clone()));
    let lam_g_a = compute_lambda(&g_values.slice_rows(ga.clone()));
    let lam_g_b = compute_lambda(&g_values.slice_rows(gb.clone()));

    let scale_half = |m: &mut DenseMatrix| {
        for v in m.data_mut() {
            *v *= 0.5;
        }
    };

    // First halves consume the second halves' Gram estimates and vice versa.
    let (mut df_a, mut dg_a) = nestedlora_cotangents(
        masks,
        &f_values.slice_rows(fa.clone()),
        &g_values.slice_rows(ga.clone()),
        &t_forward.slice_rows(ga),
        &t_adjoint.slice_rows(fa),
        &lam_f_b,
        &lam_g_b,
    )?;
    let (mut df_b, mut dg_b) = nestedlora_cotangents(
        masks,
        &f_values.slice_rows(fb.clone()),
        &g_values.slice_rows(gb.clone()),
        &t_forward.slice_rows(gb),
        &t_adjoint.slice_rows(fb),
        &lam_f_a,
        &lam_g_a,
    )?;
    // Each half call is normalized by S/2; halve so the two halves together
    // average instead of sum.
    scale_half(&mut df_a);
    scale_half(&mut df_b);
    scale_half(&mut dg_a);
    scale_half(&mut dg_b);
    Ok((df_a.vstack(&df_b)?, dg_a.vstack(&dg_b)?))
}

/// Pad a function batch with the constant first mode (a literal column of
/// ones), mirroring the fictitious first singular functions of the
/// un-subtracted density-ratio kernel.
pub fn pad_constant_mode(v: &FunctionBatch) -> FunctionBatch {
    let mut out = DenseMatrix::zeros(v.rows(), v.cols() + 1);
    for b in 0..v.rows() {
        out.set(b, 0, 1.0);
        let src = v.row(b);
        out.row_mut(b)[1..].copy_from_slice(src);
    }
    out
}

/// Strip the constant first mode from a padded cotangent or value batch.
pub fn strip_constant_mode(v: &FunctionBatch) -> FunctionBatch {
    DenseMatrix::from_fn(v.rows(), v.cols() - 1, |b, l| v.get(b, l + 1))
}

/// Per-sample cotangent of the unbiased NeuralEF loss
/// `4 { -T phi_l + sum_{i<l} <phi_i|phi_l> T phi_i }` (EVD setting only;
/// the training loop keeps the functions unit-norm).
pub fn neuralef_unbiased_cotangent(
    f_values: &FunctionBatch,
    t_values: &FunctionBatch,
    gram_indep: &DenseMatrix,
) -> Result<FunctionBatch> {
    let s = f_values.rows();
    let l = f_values.cols();
    if t_values.rows() != s || t_values.cols() != l || gram_indep.rows() != l {
        return Err(Error::ShapeMismatch {
            expected: format!("{s}x{l} values with {l}x{l} gram"),
            got: format!(
                "{}x{} t_values, {}x{} gram",
                t_values.rows(),
                t_values.cols(),
                gram_indep.rows(),
                gram_indep.cols()
            ),
        });
    }
    let scale = 4.0 / s as f64;
    let mut out = DenseMatrix::zeros(s, l);
    for b in 0..s {
        let trow = t_values.row(b);
        let orow = out.row_mut(b);
        for m in 0..l {
            let mut acc = -trow[m];
            // Strictly lower modes couple in; the first mode is pure
            // Rayleigh ascent.
            for (i, &ti) in trow.iter().enumerate().take(m) {
                acc += gram_indep.get(i, m) * ti;
            }
            orow[m] = scale * acc;
        }
    }
    Ok(out)
}
