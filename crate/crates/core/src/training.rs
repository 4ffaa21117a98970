//! Stochastic training loop: samplers, optimizers, learning-rate schedule,
//! parameter EMA, seeding, and periodic loss logging.
//!
//! One master seed fans out to named sub-streams (init, sampler, split) so
//! component changes don't perturb unrelated draws. Iterations are strictly
//! sequential; batch evaluation inside one iteration may parallelize.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, FunctionBatch};
use crate::models::{CompiledModel, ModelParams};
use crate::nestedlora::{
    compute_lambda, compute_lambda_weighted, nested_objective, nestedlora_cotangents,
    nestedlora_cotangents_split, nestedlora_cotangents_weighted, neuralef_unbiased_cotangent,
    pad_constant_mode, strip_constant_mode, LossReport, NestingMasks,
};
use crate::operators::{
    cdk_pair_contraction, matrix_operator_apply, negative_hamiltonian_apply, HamiltonianSpec,
    ImportanceScheme,
};
use crate::problems::DiscreteCdkInstance;
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Rmsprop { lr: f64, alpha: f64, eps: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { lr: f64, momentum: f64 },
}

impl OptimizerKind {
    pub fn rmsprop(lr: f64) -> Self {
        OptimizerKind::Rmsprop { lr, alpha: 0.99, eps: 1e-8 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::SgdMomentum { lr, momentum: 0.0 }
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerKind::Rmsprop { lr, .. }
            | OptimizerKind::Adam { lr, .. }
            | OptimizerKind::SgdMomentum { lr, .. } => *lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Cosine decay: `base_lr * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    let frac = if total_steps == 0 { 0.0 } else { step as f64 / total_steps as f64 };
    base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Per-model optimizer state.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Rmsprop { sq_avg: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, step: u64 },
    Sgd { buf: Vec<f64> },
}

impl OptimizerState {
    pub fn new(kind: &OptimizerKind, dim: usize) -> Self {
        match kind {
            OptimizerKind::Rmsprop { .. } => OptimizerState::Rmsprop { sq_avg: vec![0.0; dim] },
            OptimizerKind::Adam { .. } => {
                OptimizerState::Adam { m: vec![0.0; dim], v: vec![0.0; dim], step: 0 }
            }
            OptimizerKind::SgdMomentum { .. } => OptimizerState::Sgd { buf: vec![0.0; dim] },
        }
    }
}

/// One optimizer update in place; pure function of (state, params, grad, lr).
pub fn optimizer_step(
    kind: &OptimizerKind,
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    lr_now: f64,
) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient entries", params.len()),
            got: format!("{}", grad.len()),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "gradient".into(), index: i });
    }
    match (kind, state) {
        (OptimizerKind::Rmsprop { alpha, eps, .. }, OptimizerState::Rmsprop { sq_avg }) => {
            for i in 0..params.len() {
                sq_avg[i] = alpha * sq_avg[i] + (1.0 - alpha) * grad[i] * grad[i];
                params[i] -= lr_now * grad[i] / (sq_avg[i].sqrt() + eps);
            }
        }
        (OptimizerKind::Adam { beta1, beta2, eps, .. }, OptimizerState::Adam { m, v, step }) => {
            *step += 1;
            let t = *step as f64;
            let bc1 = 1.0 - beta1.powf(t);
            let bc2 = 1.0 - beta2.powf(t);
            for i in 0..params.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= lr_now * m_hat / (v_hat.sqrt() + eps);
            }
        }
        (OptimizerKind::SgdMomentum { momentum, .. }, OptimizerState::Sgd { buf }) => {
            for i in 0..params.len() {
                buf[i] = momentum * buf[i] + grad[i];
                params[i] -= lr_now * buf[i];
            }
        }
        _ => return Err(Error::invalid("optimizer state does not match optimizer kind")),
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

/// Sample-point generator, deterministic given its seed stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    DatasetIndices { n: usize },
}

impl Sampler {
    pub fn dim(&self) -> usize {
        match self {
            Sampler::Gaussian { mean, .. } => mean.len(),
            Sampler::UniformBox { lo, .. } => lo.len(),
            Sampler::DatasetIndices { .. } => 1,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, s: usize) -> DenseMatrix {
        match self {
            Sampler::Gaussian { mean, std } => {
                let d = mean.len();
                DenseMatrix::from_fn(s, d, |_, j| {
                    let z: f64 = StandardNormal.sample(rng);
                    mean[j] + std[j] * z
                })
            }
            Sampler::UniformBox { lo, hi } => {
                let d = lo.len();
                DenseMatrix::from_fn(s, d, |_, j| rng.gen_range(lo[j]..hi[j]))
            }
            Sampler::DatasetIndices { n } => {
                DenseMatrix::from_fn(s, 1, |_, _| rng.gen_range(0..*n) as f64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Even (the split-batch Gram estimator needs equal halves). Ignored in
    /// full-population mode.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    /// EMA decay in [0, 1); 0 tracks the raw parameters.
    pub ema_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Deterministic full-population gradients (finite domains only).
    pub full_population: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.full_population {
            if self.batch_size % 2 != 0 {
                return Err(Error::invalid("batch_size must be even"));
            }
            if self.batch_size < 4 {
                return Err(Error::invalid("batch_size must be at least 4"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay must lie in [0, 1)"));
        }
        if self.optimizer.base_lr() <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Model plus its mutable parameters.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub model: CompiledModel,
    pub params: ModelParams,
}

/// Operator backend driving the training loop.
pub enum TrainBackend<'a> {
    /// SVD of a matrix: `f` lives on column indices, `g` on row indices.
    MatrixSvd { a: &'a DenseMatrix },
    /// EVD of a symmetric matrix: single function family over row indices.
    MatrixEvd { a: &'a DenseMatrix },
    /// EVD of a shifted negative Hamiltonian over a continuous domain.
    Hamiltonian {
        spec: &'a HamiltonianSpec,
        importance: &'a ImportanceScheme,
        sampler: &'a Sampler,
    },
    /// SVD of a canonical dependence kernel given a discrete joint pmf.
    DiscreteCdk { inst: &'a DiscreteCdkInstance },
}

impl TrainBackend<'_> {
    pub fn is_evd(&self) -> bool {
        matches!(self, TrainBackend::MatrixEvd { .. } | TrainBackend::Hamiltonian { .. })
    }

    pub fn pads_constant_mode(&self) -> bool {
        matches!(self, TrainBackend::DiscreteCdk { .. })
    }
}

/// One logged evaluation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossReport,
    /// Per-mode squared-norm estimates `E[f_l^2]` (constant mode stripped).
    pub norms_f: Vec<f64>,
    pub norms_g: Option<Vec<f64>>,
    /// Per-mode Rayleigh quotients (EVD backends only).
    pub rayleigh: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ema_f: ModelParams,
    pub ema_g: Option<ModelParams>,
    pub log: Vec<MetricRecord>,
    pub anomalies_skipped: usize,
    /// Set when the anomaly budget was exhausted and training stopped early.
    pub aborted: Option<String>,
}

struct StepData {
    batch_f: DenseMatrix,
    batch_g: Option<DenseMatrix>,
    f_values: FunctionBatch,
    g_values: FunctionBatch,
    t_forward: FunctionBatch,
    t_adjoint: FunctionBatch,
    /// Probability weights in full-population CDK mode.
    weights: Option<Vec<f64>>,
    anomalies: usize,
}

/// Run NestedLoRA training. `g` must be given exactly for the SVD backends
/// (matrix SVD and CDK) and absent for the EVD backends.
pub fn train(
    config: &TrainConfig,
    backend: &TrainBackend,
    masks: &NestingMasks,
    f: &mut ModelState,
    mut g: Option<&mut ModelState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if backend.is_evd() && g.is_some() {
        return Err(Error::invalid("EVD backends identify g with f; pass g = None"));
    }
    if !backend.is_evd() && g.is_none() {
        return Err(Error::invalid("SVD backends need a separate g model"));
    }
    if backend.pads_constant_mode() != masks.first_mode_const {
        return Err(Error::invalid(
            "constant-mode padding of the masks must match the backend (CDK pads, others don't)",
        ));
    }
    let l = f.model.spec().output_modes;
    let expected_modes = l + usize::from(masks.first_mode_const);
    if masks.modes() != expected_modes {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected_modes} masked modes"),
            got: format!("{}", masks.modes()),
        });
    }
    if let TrainBackend::Hamiltonian { .. } = backend {
        if config.full_population {
            return Err(Error::invalid("full-population gradients need a finite domain"));
        }
    }

    let mut sampler_rng = stream_rng(config.seed, "sampler");
    let mut opt_f = OptimizerState::new(&config.optimizer, f.params.values.len());
    let mut opt_g =
        g.as_ref().map(|gs| OptimizerState::new(&config.optimizer, gs.params.values.len()));
    let mut ema_f = f.params.clone();
    let mut ema_g = g.as_ref().map(|gs| gs.params.clone());

    let mut log = Vec::new();
    let mut anomalies_skipped = 0usize;
    let mut aborted = None;
    let anomaly_budget = (config.iterations / 100).max(1);

    for iter in 0..config.iterations {
        let lr_now = match config.lr_schedule {
            LrSchedule::Constant => config.optimizer.base_lr(),
            LrSchedule::Cosine => cosine_lr(config.optimizer.base_lr(), iter, config.iterations),
        };

        let step = prepare_step(config, backend, f, g.as_deref(), &mut sampler_rng)?;
        if step.anomalies > 0 {
            anomalies_skipped += 1;
            log::warn!(
                "iteration {iter}: operator anomaly at {} batch points; skipping update",
                step.anomalies
            );
            if anomalies_skipped > anomaly_budget {
                aborted = Some(format!(
                    "aborted at iteration {iter}: {anomalies_skipped} anomalous batches exceed \
                     the 1% budget ({anomaly_budget})"
                ));
                break;
            }
            continue;
        }

        let (df, dg) = step_cotangents(config, masks, &step)?;
        let (df, dg) = if masks.first_mode_const {
            (strip_constant_mode(&df), strip_constant_mode(&dg))
        } else {
            (df, dg)
        };

        if backend.is_evd() {
            let mut total = df;
            for (a, b) in total.data_mut().iter_mut().zip(dg.data()) {
                *a += b;
            }
            let grad = f.model.backward(&f.params, &step.batch_f, &total)?;
            optimizer_step(&config.optimizer, &mut opt_f, &mut f.params.values, &grad, lr_now)?;
        } else {
            let grad_f = f.model.backward(&f.params, &step.batch_f, &df)?;
            optimizer_step(&config.optimizer, &mut opt_f, &mut f.params.values, &grad_f, lr_now)?;
            let gs = g.as_deref_mut().expect("validated above");
            let batch_g = step.batch_g.as_ref().expect("svd backend provides g batch");
            let grad_g = gs.model.backward(&gs.params, batch_g, &dg)?;
            optimizer_step(
                &config.optimizer,
                opt_g.as_mut().expect("state exists"),
                &mut gs.params.values,
                &grad_g,
                lr_now,
            )?;
        }

        ema_update(&mut ema_f.values, &f.params.values, config.ema_decay);
        if let (Some(ema), Some(gs)) = (ema_g.as_mut(), g.as_deref()) {
            ema_update(&mut ema.values, &gs.params.values, config.ema_decay);
        }

        if config.eval_every > 0 && (iter % config.eval_every == 0 || iter + 1 == config.iterations)
        {
            log.push(metric_record(iter, lr_now, masks, backend, &step)?);
        }
    }

    Ok(TrainOutcome { ema_f, ema_g, log, anomalies_skipped, aborted })
}

fn prepare_step(
    config: &TrainConfig,
    backend: &TrainBackend,
    f: &ModelState,
    g: Option<&ModelState>,
    sampler_rng: &mut ChaCha8Rng,
) -> Result<StepData> {
    match backend {
        TrainBackend::MatrixSvd { a } => {
            let gs = g.expect("validated");
            let (batch_rows, batch_cols) = if config.full_population {
                (
                    DenseMatrix::from_fn(a.rows(), 1, |i, _| i as f64),
                    DenseMatrix::from_fn(a.cols(), 1, |j, _| j as f64),
                )
            } else {
                let rows = Sampler::DatasetIndices { n: a.rows() }
                    .sample(sampler_rng, config.batch_size);
                let cols = Sampler::DatasetIndices { n: a.cols() }
                    .sample(sampler_rng, config.batch_size);
                (rows, cols)
            };
            let app = matrix_operator_apply(
                a,
                &f.model,
                &f.params,
                &gs.model,
                &gs.params,
                &batch_rows,
                &batch_cols,
            )?;
            Ok(StepData {
                batch_f: batch_cols,
                batch_g: Some(batch_rows),
                f_values: app.adjoint.f_values,
                g_values: app.forward.f_values,
                t_forward: app.forward.t_values,
                t_adjoint: app.adjoint.t_values,
                weights: None,
                anomalies: 0,
            })
        }
        TrainBackend::MatrixEvd { a } => {
            if a.rows() != a.cols() {
                return Err(Error::invalid("EVD needs a square matrix"));
            }
            let batch = if config.full_population {
                DenseMatrix::from_fn(a.rows(), 1, |i, _| i as f64)
            } else {
                Sampler::DatasetIndices { n: a.rows() }.sample(sampler_rng, config.batch_size)
            };
            let app = matrix_operator_apply(
                a, &f.model, &f.params, &f.model, &f.params, &batch, &batch,
            )?;
            // Self-adjoint: forward side at the same batch serves both roles.
            Ok(StepData {
                batch_f: batch.clone(),
                batch_g: None,
                f_values: app.forward.f_values.clone(),
                g_values: app.forward.f_values,
                t_forward: app.forward.t_values.clone(),
                t_adjoint: app.forward.t_values,
                weights: None,
                anomalies: 0,
            })
        }
        TrainBackend::Hamiltonian { spec, importance, sampler } => {
            let batch = sampler.sample(sampler_rng, config.batch_size);
            let app = negative_hamiltonian_apply(&f.model, &f.params, spec, importance, &batch)?;
            let anomalies = app.anomalies.len();
            Ok(StepData {
                batch_f: batch,
                batch_g: None,
                f_values: app.op.f_values.clone(),
                g_values: app.op.f_values,
                t_forward: app.op.t_values.clone(),
                t_adjoint: app.op.t_values,
                weights: None,
                anomalies,
            })
        }
        TrainBackend::DiscreteCdk { inst } => {
            let gs = g.expect("validated");
            let (batch_x, batch_y, weights) = if config.full_population {
                // Enumerate all pairs with their joint probability; the
                // weighted Gram then marginalizes exactly.
                let nx = inst.pmf.rows();
                let ny = inst.pmf.cols();
                let mut bx = DenseMatrix::zeros(nx * ny, 1);
                let mut by = DenseMatrix::zeros(nx * ny, 1);
                let mut w = Vec::with_capacity(nx * ny);
                for x in 0..nx {
                    for y in 0..ny {
                        bx.set(x * ny + y, 0, x as f64);
                        by.set(x * ny + y, 0, y as f64);
                        w.push(inst.pmf.get(x, y));
                    }
                }
                (bx, by, Some(w))
            } else {
                let s = config.batch_size;
                let mut bx = DenseMatrix::zeros(s, 1);
                let mut by = DenseMatrix::zeros(s, 1);
                for b in 0..s {
                    let (x, y) = inst.sample_pair(sampler_rng);
                    bx.set(b, 0, x as f64);
                    by.set(b, 0, y as f64);
                }
                (bx, by, None)
            };
            let f_values = pad_constant_mode(&f.model.forward(&f.params, &batch_x)?);
            let g_values = pad_constant_mode(&gs.model.forward(&gs.params, &batch_y)?);
            // Paired-sample swap: the adjoint application at x_b is g(y_b)
            // and vice versa (change of measure absorbs the kernel).
            Ok(StepData {
                batch_f: batch_x,
                batch_g: Some(batch_y),
                t_forward: f_values.clone(),
                t_adjoint: g_values.clone(),
                f_values,
                g_values,
                weights,
                anomalies: 0,
            })
        }
    }
}

fn step_cotangents(
    config: &TrainConfig,
    masks: &NestingMasks,
    step: &StepData,
) -> Result<(FunctionBatch, FunctionBatch)> {
    if let Some(w) = &step.weights {
        let lam_f = compute_lambda_weighted(&step.f_values, w);
        let lam_g = compute_lambda_weighted(&step.g_values, w);
        nestedlora_cotangents_weighted(
            masks,
            &step.f_values,
            &step.g_values,
            &step.t_forward,
            &step.t_adjoint,
            &lam_f,
            &lam_g,
            w,
        )
    } else if config.full_population {
        let lam_f = compute_lambda(&step.f_values);
        let lam_g = compute_lambda(&step.g_values);
        nestedlora_cotangents(
            masks,
            &step.f_values,
            &step.g_values,
            &step.t_forward,
            &step.t_adjoint,
            &lam_f,
            &lam_g,
        )
    } else {
        nestedlora_cotangents_split(
            masks,
            &step.f_values,
            &step.g_values,
            &step.t_forward,
            &step.t_adjoint,
        )
    }
}

fn metric_record(
    iteration: usize,
    lr: f64,
    masks: &NestingMasks,
    backend: &TrainBackend,
    step: &StepData,
) -> Result<MetricRecord> {
    let (lam_f, lam_g, op_terms) = match &step.weights {
        Some(w) => {
            let lam_f = compute_lambda_weighted(&step.f_values, w);
            let lam_g = compute_lambda_weighted(&step.g_values, w);
            // Weighted pair contraction: sum_b w_b f_l(x_b) g_l(y_b).
            let n = step.f_values.cols();
            let mut terms = vec![0.0; n];
            for b in 0..step.f_values.rows() {
                for m in 0..n {
                    terms[m] += w[b] * step.f_values.get(b, m) * step.g_values.get(b, m);
                }
            }
            (lam_f, lam_g, terms)
        }
        None => {
            let lam_f = compute_lambda(&step.f_values);
            let lam_g = compute_lambda(&step.g_values);
            let terms = match backend {
                TrainBackend::DiscreteCdk { .. } => {
                    cdk_pair_contraction(&step.f_values, &step.g_values)?
                }
                _ => {
                    // <g_l | T f_l> ~ mean_b g_l(y_b) (T f_l)(y_b).
                    let s = step.g_values.rows();
                    let n = step.g_values.cols();
                    (0..n)
                        .map(|m| {
                            (0..s)
                                .map(|b| step.g_values.get(b, m) * step.t_forward.get(b, m))
                                .sum::<f64>()
                                / s as f64
                        })
                        .collect()
                }
            };
            (lam_f, lam_g, terms)
        }
    };
    let loss = nested_objective(masks, &op_terms, &lam_f, &lam_g)?;

    let strip = usize::from(masks.first_mode_const);
    let norms_f: Vec<f64> = (strip..masks.modes()).map(|m| lam_f.get(m, m)).collect();
    let norms_g = if backend.is_evd() {
        None
    } else {
        Some((strip..masks.modes()).map(|m| lam_g.get(m, m)).collect())
    };
    let rayleigh = if backend.is_evd() {
        let s = step.f_values.rows();
        Some(
            (0..step.f_values.cols())
                .map(|m| {
                    let num: f64 = (0..s)
                        .map(|b| step.f_values.get(b, m) * step.t_forward.get(b, m))
                        .sum::<f64>()
                        / s as f64;
                    let den = lam_f.get(m, m);
                    if den > 1e-12 {
                        num / den
                    } else {
                        f64::NAN
                    }
                })
                .collect(),
        )
    } else {
        None
    };

    Ok(MetricRecord { iteration, lr, loss, norms_f, norms_g, rayleigh })
}

/// Unbiased-NeuralEF baseline (EVD, full-population tabular models only):
/// per-mode Rayleigh ascent with strictly-lower-mode coupling, functions
/// kept unit-norm by explicit column renormalization after every step.
pub fn train_neuralef(
    config: &TrainConfig,
    a: &DenseMatrix,
    f: &mut ModelState,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !config.full_population {
        return Err(Error::invalid("the NeuralEF baseline is implemented full-population only"));
    }
    if a.rows() != a.cols() {
        return Err(Error::invalid("EVD needs a square matrix"));
    }
    use crate::models::HeadMode;
    if !matches!(f.model.spec().head_mode, HeadMode::Tabular { .. }) {
        return Err(Error::invalid(
            "the NeuralEF baseline normalizes function columns exactly; tabular models only",
        ));
    }

    let n = a.rows();
    let l = f.model.spec().output_modes;
    let batch = DenseMatrix::from_fn(n, 1, |i, _| i as f64);
    let mut opt = OptimizerState::new(&config.optimizer, f.params.values.len());
    normalize_table_columns(&mut f.params, n, l);
    let mut ema = f.params.clone();
    let mut log = Vec::new();

    for iter in 0..config.iterations {
        let lr_now = match config.lr_schedule {
            LrSchedule::Constant => config.optimizer.base_lr(),
            LrSchedule::Cosine => cosine_lr(config.optimizer.base_lr(), iter, config.iterations),
        };
        let app =
            matrix_operator_apply(a, &f.model, &f.params, &f.model, &f.params, &batch, &batch)?;
        let phi = app.forward.f_values;
        let t = app.forward.t_values;
        let gram = compute_lambda(&phi);
        let df = neuralef_unbiased_cotangent(&phi, &t, &gram)?;
        let grad = f.model.backward(&f.params, &batch, &df)?;
        optimizer_step(&config.optimizer, &mut opt, &mut f.params.values, &grad, lr_now)?;
        normalize_table_columns(&mut f.params, n, l);
        ema_update(&mut ema.values, &f.params.values, config.ema_decay);

        if config.eval_every > 0 && (iter % config.eval_every == 0 || iter + 1 == config.iterations)
        {
            let rayleigh: Vec<f64> = (0..l)
                .map(|m| (0..n).map(|b| phi.get(b, m) * t.get(b, m)).sum::<f64>() / n as f64)
                .collect();
            let lam = gram.clone();
            let op_terms = rayleigh.clone();
            let masks = crate::nestedlora::no_nesting_masks(l, false)?;
            let loss = nested_objective(&masks, &op_terms, &lam, &lam)?;
            log.push(MetricRecord {
                iteration: iter,
                lr: lr_now,
                loss,
                norms_f: (0..l).map(|m| lam.get(m, m)).collect(),
                norms_g: None,
                rayleigh: Some(rayleigh),
            });
        }
    }

    Ok(TrainOutcome { ema_f: ema, ema_g: None, log, anomalies_skipped: 0, aborted: None })
}

/// Rescale every table column to unit empirical norm `(1/N) sum phi^2 = 1`.
fn normalize_table_columns(params: &mut ModelParams, n: usize, l: usize) {
    for m in 0..l {
        let mut sq = 0.0;
        for i in 0..n {
            let v = params.values[i * l + m];
            sq += v * v;
        }
        let norm = (sq / n as f64).sqrt();
        if norm > 1e-12 {
            for i in 0..n {
                params.values[i * l + m] /= norm;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, Activation, HeadMode, ModelSpec};
    use crate::nestedlora::joint_masks;

    #[test]
    fn sgd_first_step() {
        let kind = OptimizerKind::SgdMomentum { lr: 0.1, momentum: 0.9 };
        let mut state = OptimizerState::new(&kind, 2);
        let mut params = vec![0.0, 0.0];
        optimizer_step(&kind, &mut state, &mut params, &[1.0, -2.0], 0.1).unwrap();
        assert!((params[0] + 0.1).abs() < 1e-15);
        assert!((params[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let kind = OptimizerKind::sgd(0.5);
        let mut state = OptimizerState::new(&kind, 2);
        let mut params = vec![1.0, -3.0];
        optimizer_step(&kind, &mut state, &mut params, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(params, vec![1.0, -3.0]);
        match state {
            OptimizerState::Sgd { buf } => assert_eq!(buf, vec![0.0, 0.0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let kind = OptimizerKind::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut state = OptimizerState::new(&kind, 3);
        let mut params = vec![0.0; 3];
        let grad = [0.3, -2.0, 1e-4];
        optimizer_step(&kind, &mut state, &mut params, &grad, 0.01).unwrap();
        for (p, g) in params.iter().zip(&grad) {
            // Delta = -lr * g / (|g| + eps): magnitude ~ lr, sign opposite g.
            let expect = -0.01 * g / (g.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
        }
    }

    #[test]
    fn optimizer_rejects_non_finite_gradient() {
        let kind = OptimizerKind::sgd(0.1);
        let mut state = OptimizerState::new(&kind, 2);
        let mut params = vec![0.0; 2];
        let err = optimizer_step(&kind, &mut state, &mut params, &[0.0, f64::NAN], 0.1);
        match err {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2.0, 0, 100), 2.0);
        assert!(cosine_lr(2.0, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(2.0, 50, 100) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ema_examples() {
        let mut ema = vec![0.0];
        ema_update(&mut ema, &[1.0], 0.0);
        assert_eq!(ema, vec![1.0]);

        // Constant params: gap shrinks geometrically.
        let mut ema = vec![0.0];
        for _ in 0..1000 {
            ema_update(&mut ema, &[1.0], 0.995);
        }
        let residual = 1.0 - ema[0];
        let expect = 0.995f64.powi(1000);
        assert!((residual - expect).abs() < 1e-12, "{residual} vs {expect}");
        assert!((expect - 6.6e-3).abs() < 1e-4);
    }

    fn tabular_state(n: usize, l: usize, seed: u64) -> ModelState {
        let spec = ModelSpec {
            input_dim: 1,
            output_modes: l,
            head_mode: HeadMode::Tabular { num_points: n },
            hidden_widths: vec![],
            activation: Activation::Softplus,
            fourier: None,
        };
        let params = init_params(&spec, seed).unwrap();
        ModelState { model: CompiledModel::new(spec).unwrap(), params }
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let a = DenseMatrix::identity(4);
        let mut f = tabular_state(4, 2, 1);
        let initial = f.params.values.clone();
        let config = TrainConfig {
            iterations: 0,
            batch_size: 4,
            optimizer: OptimizerKind::sgd(0.1),
            lr_schedule: LrSchedule::Constant,
            ema_decay: 0.9,
            seed: 7,
            eval_every: 1,
            full_population: true,
        };
        let masks = joint_masks(&[0.5, 0.5], false).unwrap();
        let out = train(&config, &TrainBackend::MatrixEvd { a: &a }, &masks, &mut f, None).unwrap();
        assert_eq!(f.params.values, initial);
        assert_eq!(out.ema_f.values, initial);
        assert!(out.log.is_empty());
    }

    #[test]
    fn determinism_same_seed_same_log() {
        let a = DenseMatrix::from_fn(6, 6, |i, j| {
            let v = ((i * 7 + j * 3) % 5) as f64 / 5.0;
            if i == j {
                v + 1.0
            } else {
                v
            }
        });
        let sym = DenseMatrix::from_fn(6, 6, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
        let config = TrainConfig {
            iterations: 40,
            batch_size: 4,
            optimizer: OptimizerKind::rmsprop(1e-2),
            lr_schedule: LrSchedule::Cosine,
            ema_decay: 0.99,
            seed: 11,
            eval_every: 10,
            full_population: false,
        };
        let masks = joint_masks(&[1.0 / 3.0; 3], false).unwrap();
        let run = |seed: u64| {
            let mut f = tabular_state(6, 3, 5);
            let cfg = TrainConfig { seed, ..config.clone() };
            let out =
                train(&cfg, &TrainBackend::MatrixEvd { a: &sym }, &masks, &mut f, None).unwrap();
            (f.params.values, serde_json::to_string(&out.log).unwrap())
        };
        let (p1, l1) = run(11);
        let (p2, l2) = run(11);
        let (p3, l3) = run(12);
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert!(p1 != p3 || l1 != l3);
    }

    #[test]
    fn ema_stays_in_coordinatewise_hull() {
        let a = DenseMatrix::from_fn(5, 5, |i, j| if i == j { (i + 1) as f64 } else { 0.1 });
        let sym = DenseMatrix::from_fn(5, 5, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
        let mut f = tabular_state(5, 2, 3);
        let masks = joint_masks(&[0.5, 0.5], false).unwrap();
        let config = TrainConfig {
            iterations: 200,
            batch_size: 4,
            optimizer: OptimizerKind::sgd(1e-2),
            lr_schedule: LrSchedule::Constant,
            ema_decay: 0.95,
            seed: 17,
            eval_every: 0,
            full_population: true,
        };
        // Track the hull manually by re-running the loop in lockstep.
        let mut lo = f.params.values.clone();
        let mut hi = f.params.values.clone();
        let mut probe = f.clone();
        let mut opt = OptimizerState::new(&config.optimizer, probe.params.values.len());
        let batch = DenseMatrix::from_fn(5, 1, |i, _| i as f64);
        for _ in 0..config.iterations {
            let app = matrix_operator_apply(
                &sym,
                &probe.model,
                &probe.params,
                &probe.model,
                &probe.params,
                &batch,
                &batch,
            )
            .unwrap();
            let lam = compute_lambda(&app.forward.f_values);
            let (df, dg) = nestedlora_cotangents(
                &masks,
                &app.forward.f_values,
                &app.forward.f_values,
                &app.forward.t_values,
                &app.forward.t_values,
                &lam,
                &lam,
            )
            .unwrap();
            let mut total = df;
            for (x, y) in total.data_mut().iter_mut().zip(dg.data()) {
                *x += y;
            }
            let grad = probe.model.backward(&probe.params, &batch, &total).unwrap();
            optimizer_step(&config.optimizer, &mut opt, &mut probe.params.values, &grad, 1e-2)
                .unwrap();
            for (i, &v) in probe.params.values.iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        let out = train(&config, &TrainBackend::MatrixEvd { a: &sym }, &masks, &mut f, None)
            .unwrap();
        for (i, &e) in out.ema_f.values.iter().enumerate() {
            assert!(
                e >= lo[i] - 1e-12 && e <= hi[i] + 1e-12,
                "ema[{i}] = {e} outside [{}, {}]",
                lo[i],
                hi[i]
            );
        }
    }

    #[test]
    fn full_batch_loss_is_monotone_for_small_lr() {
        let a = DenseMatrix::from_fn(6, 4, |i, j| ((i * 5 + j * 11) % 7) as f64 / 7.0 - 0.4);
        let mut f = tabular_state(4, 2, 9);
        let mut g = tabular_state(6, 2, 10);
        let masks = joint_masks(&[0.5, 0.5], false).unwrap();
        let config = TrainConfig {
            iterations: 800,
            batch_size: 4,
            optimizer: OptimizerKind::sgd(1e-3),
            lr_schedule: LrSchedule::Constant,
            ema_decay: 0.0,
            seed: 13,
            eval_every: 1,
            full_population: true,
        };
        let out = train(
            &config,
            &TrainBackend::MatrixSvd { a: &a },
            &masks,
            &mut f,
            Some(&mut g),
        )
        .unwrap();
        let losses: Vec<f64> = out.log.iter().map(|r| r.loss.total).collect();
        for w in losses.windows(101) {
            assert!(
                w[100] <= w[0] + 1e-9,
                "loss increased over a 100-step window: {} -> {}",
                w[0],
                w[100]
            );
        }
    }
}
