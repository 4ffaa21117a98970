//! Parametric function models `f: R^D -> R^L` with explicit forward
//! evaluation and reverse (vector-Jacobian) accumulation of parameter
//! gradients. No external autodiff: the training engine hands per-sample
//! cotangents to [`model_backward`].

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, FunctionBatch};
use crate::rng::stream_rng;

static EVAL_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Worker-thread cap for batched model evaluation. Results are bitwise
/// independent of this setting: work is split into fixed-size row chunks and
/// every chunk is computed identically wherever it runs.
pub fn set_eval_threads(n: usize) {
    EVAL_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn eval_threads() -> usize {
    EVAL_THREADS.load(Ordering::Relaxed)
}

const CHUNK_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    SinCos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum HeadMode {
    /// L independent MLPs evaluated in one vectorized pass.
    DisjointHeads,
    /// One trunk with an L-column final linear layer.
    SharedTrunk,
    /// Exact function space R^{N x L} over an enumerated finite domain;
    /// inputs are row indices.
    Tabular { num_points: usize },
}

/// Descriptor of a frozen random Fourier feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierDescriptor {
    pub num_features: usize,
    /// Entries of the projection are drawn from N(0, 2*pi*scale).
    pub scale: f64,
    pub append_raw_input: bool,
    pub seed: u64,
}

/// Frozen multi-scale Fourier feature map.
#[derive(Debug, Clone)]
pub struct FourierFeatureMap {
    projection: DenseMatrix, // K x D
    append_raw_input: bool,
}

impl FourierFeatureMap {
    /// Draw the K x D projection from N(0, 2*pi*scale); immutable afterwards.
    pub fn from_descriptor(desc: &FourierDescriptor, input_dim: usize) -> Self {
        let std = (2.0 * std::f64::consts::PI * desc.scale).sqrt();
        let mut rng = stream_rng(desc.seed, "fourier");
        let projection = DenseMatrix::from_fn(desc.num_features, input_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        });
        Self { projection, append_raw_input: desc.append_raw_input }
    }

    /// Build directly from a projection matrix (used by tests).
    pub fn from_projection(projection: DenseMatrix, append_raw_input: bool) -> Self {
        Self { projection, append_raw_input }
    }

    pub fn projection(&self) -> &DenseMatrix {
        &self.projection
    }

    pub fn num_features(&self) -> usize {
        self.projection.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    /// Output dimension: 2K, plus D when the raw input is appended.
    pub fn output_dim(&self) -> usize {
        2 * self.num_features() + if self.append_raw_input { self.input_dim() } else { 0 }
    }

    fn features_into(&self, point: &[f64], out: &mut [f64]) {
        let k = self.num_features();
        for r in 0..k {
            let proj = self.projection.row(r);
            let mut z = 0.0;
            for (p, x) in proj.iter().zip(point) {
                z += p * x;
            }
            out[r] = z.cos();
            out[k + r] = z.sin();
        }
        if self.append_raw_input {
            out[2 * k..].copy_from_slice(point);
        }
    }
}

/// Map a batch of points through the feature map. Columns are ordered
/// (cos block, sin block, optional raw block).
pub fn fourier_features(map: &FourierFeatureMap, batch: &DenseMatrix) -> Result<DenseMatrix> {
    if batch.cols() != map.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} input columns", map.input_dim()),
            got: format!("{}", batch.cols()),
        });
    }
    let mut out = DenseMatrix::zeros(batch.rows(), map.output_dim());
    for b in 0..batch.rows() {
        map.features_into(batch.row(b), out.row_mut(b));
    }
    Ok(out)
}

/// Architecture of a parametric model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub output_modes: usize,
    pub head_mode: HeadMode,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub fourier: Option<FourierDescriptor>,
}

fn default_activation() -> Activation {
    Activation::Softplus
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Bias,
    Table,
}

/// One contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSegment {
    /// Owning head for disjoint parametrization; `None` for shared/tabular.
    pub head: Option<usize>,
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSegment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Slice map of the flat parameter vector onto layers and heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<ParamSegment>,
    pub total: usize,
}

impl ParamLayout {
    /// Index range owned by head `h` (disjoint-heads mode).
    pub fn head_range(&self, h: usize) -> std::ops::Range<usize> {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for seg in &self.segments {
            if seg.head == Some(h) {
                lo = lo.min(seg.offset);
                hi = hi.max(seg.offset + seg.len());
            }
        }
        lo..hi
    }
}

/// Flat parameter vector plus the layout that maps slices to layers/heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_modes == 0 {
            return Err(Error::invalid("output_modes must be at least 1"));
        }
        match &self.head_mode {
            HeadMode::Tabular { num_points } => {
                if *num_points == 0 {
                    return Err(Error::invalid("tabular model needs a non-empty enumerated domain"));
                }
            }
            _ => {
                if self.input_dim == 0 {
                    return Err(Error::invalid("input_dim must be at least 1"));
                }
                if self.activation == Activation::SinCos {
                    for &w in &self.hidden_widths {
                        if w % 2 != 0 {
                            return Err(Error::invalid(
                                "sin-cos activation splits the pre-activation in half; hidden widths must be even",
                            ));
                        }
                    }
                }
                if let Some(f) = &self.fourier {
                    if f.num_features == 0 {
                        return Err(Error::invalid("fourier num_features must be at least 1"));
                    }
                    if f.scale <= 0.0 {
                        return Err(Error::invalid("fourier scale must be positive"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn fourier_map(&self) -> Option<FourierFeatureMap> {
        self.fourier.as_ref().map(|d| FourierFeatureMap::from_descriptor(d, self.input_dim))
    }

    /// Width of the feature vector the first linear layer sees.
    pub fn feature_dim(&self) -> usize {
        match &self.fourier {
            Some(d) => 2 * d.num_features + if d.append_raw_input { self.input_dim } else { 0 },
            None => self.input_dim,
        }
    }

    /// Linear layer shapes (in, out), including the final output layer.
    fn layer_shapes(&self, final_out: usize) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut prev = self.feature_dim();
        for &w in &self.hidden_widths {
            shapes.push((prev, w));
            prev = w;
        }
        shapes.push((prev, final_out));
        shapes
    }

    pub fn layout(&self) -> ParamLayout {
        let mut segments = Vec::new();
        let mut offset = 0;
        match &self.head_mode {
            HeadMode::Tabular { num_points } => {
                segments.push(ParamSegment {
                    head: None,
                    layer: 0,
                    kind: SegmentKind::Table,
                    offset,
                    rows: *num_points,
                    cols: self.output_modes,
                });
                offset += num_points * self.output_modes;
            }
            HeadMode::DisjointHeads => {
                for h in 0..self.output_modes {
                    for (layer, (fan_in, fan_out)) in self.layer_shapes(1).into_iter().enumerate() {
                        segments.push(ParamSegment {
                            head: Some(h),
                            layer,
                            kind: SegmentKind::Weight,
                            offset,
                            rows: fan_out,
                            cols: fan_in,
                        });
                        offset += fan_out * fan_in;
                        segments.push(ParamSegment {
                            head: Some(h),
                            layer,
                            kind: SegmentKind::Bias,
                            offset,
                            rows: fan_out,
                            cols: 1,
                        });
                        offset += fan_out;
                    }
                }
            }
            HeadMode::SharedTrunk => {
                for (layer, (fan_in, fan_out)) in
                    self.layer_shapes(self.output_modes).into_iter().enumerate()
                {
                    segments.push(ParamSegment {
                        head: None,
                        layer,
                        kind: SegmentKind::Weight,
                        offset,
                        rows: fan_out,
                        cols: fan_in,
                    });
                    offset += fan_out * fan_in;
                    segments.push(ParamSegment {
                        head: None,
                        layer,
                        kind: SegmentKind::Bias,
                        offset,
                        rows: fan_out,
                        cols: 1,
                    });
                    offset += fan_out;
                }
            }
        }
        ParamLayout { segments, total: offset }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Draw initial parameters: linear weights from a zero-mean uniform
/// distribution scaled by fan-in (std `1/sqrt(fan_in)`), biases zero, final
/// layer scaled by 0.1 to keep initial function norms small. Tabular tables
/// are i.i.d. N(0, 1/L). Deterministic given the seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let layout = spec.layout();
    let mut values = vec![0.0; layout.total];
    let mut rng = stream_rng(seed, "init");
    let last_layer = spec.hidden_widths.len();
    for seg in &layout.segments {
        match seg.kind {
            SegmentKind::Table => {
                let std = 1.0 / (spec.output_modes as f64).sqrt();
                for v in &mut values[seg.offset..seg.offset + seg.len()] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = std * z;
                }
            }
            SegmentKind::Weight => {
                let fan_in = seg.cols as f64;
                let bound = (3.0f64).sqrt() / fan_in.sqrt();
                let final_scale = if seg.layer == last_layer { 0.1 } else { 1.0 };
                for v in &mut values[seg.offset..seg.offset + seg.len()] {
                    *v = final_scale * rng.gen_range(-bound..bound);
                }
            }
            SegmentKind::Bias => {}
        }
    }
    Ok(ModelParams { values, layout })
}

/// A model spec with its frozen feature map, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    spec: ModelSpec,
    fourier: Option<FourierFeatureMap>,
}

struct LayerView<'a> {
    weight: &'a [f64], // fan_out x fan_in, row-major
    bias: &'a [f64],
    fan_in: usize,
    fan_out: usize,
}

impl CompiledModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let fourier = spec.fourier_map();
        Ok(Self { spec, fourier })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn layer_views<'a>(&self, params: &'a ModelParams, head: Option<usize>) -> Vec<LayerView<'a>> {
        let mut layers: Vec<LayerView<'a>> = Vec::new();
        let mut pending_weight: Option<&ParamSegment> = None;
        for seg in &params.layout.segments {
            if seg.head != head {
                continue;
            }
            match seg.kind {
                SegmentKind::Weight => pending_weight = Some(seg),
                SegmentKind::Bias => {
                    let w = pending_weight.take().expect("bias follows weight");
                    layers.push(LayerView {
                        weight: &params.values[w.offset..w.offset + w.len()],
                        bias: &params.values[seg.offset..seg.offset + seg.len()],
                        fan_in: w.cols,
                        fan_out: w.rows,
                    });
                }
                SegmentKind::Table => {}
            }
        }
        layers
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        let expect = self.spec.param_count();
        if params.values.len() != expect {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect} parameters"),
                got: format!("{}", params.values.len()),
            });
        }
        Ok(())
    }

    fn table_index(&self, x: f64, num_points: usize) -> Result<usize> {
        let idx = x.round();
        if !x.is_finite() || (x - idx).abs() > 1e-9 || idx < 0.0 || idx as usize >= num_points {
            return Err(Error::invalid(format!(
                "tabular input {x} is not a valid row index (domain size {num_points})"
            )));
        }
        Ok(idx as usize)
    }

    /// Evaluate the model on a batch of points, producing an S x L batch.
    pub fn forward(&self, params: &ModelParams, batch: &DenseMatrix) -> Result<FunctionBatch> {
        self.check_params(params)?;
        if let Some(idx) = batch.first_non_finite() {
            return Err(Error::NonFinite { what: "batch point".into(), index: idx });
        }
        let s = batch.rows();
        let l = self.spec.output_modes;

        if let HeadMode::Tabular { num_points } = self.spec.head_mode {
            let mut out = DenseMatrix::zeros(s, l);
            for b in 0..s {
                let idx = self.table_index(batch.row(b)[0], num_points)?;
                out.row_mut(b).copy_from_slice(&params.values[idx * l..(idx + 1) * l]);
            }
            return Ok(out);
        }

        if batch.cols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input columns", self.spec.input_dim),
                got: format!("{}", batch.cols()),
            });
        }

        let mut out = DenseMatrix::zeros(s, l);
        let threads = eval_threads();
        if threads <= 1 || s <= CHUNK_ROWS {
            self.forward_rows(params, batch, 0..s, out.data_mut())?;
            return Ok(out);
        }

        let chunk_len = CHUNK_ROWS * l;
        let chunks: Vec<(usize, &mut [f64])> =
            out.data_mut().chunks_mut(chunk_len).enumerate().collect();
        let mut buckets: Vec<Vec<(usize, &mut [f64])>> =
            (0..threads).map(|_| Vec::new()).collect();
        for (ci, buf) in chunks {
            buckets[ci % threads].push((ci, buf));
        }
        let mut failures: Vec<(usize, Error)> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = buckets
                .into_iter()
                .map(|bucket| {
                    scope.spawn(move || -> Option<(usize, Error)> {
                        for (ci, buf) in bucket {
                            let lo = ci * CHUNK_ROWS;
                            let hi = (lo + CHUNK_ROWS).min(s);
                            if let Err(e) = self.forward_rows(params, batch, lo..hi, buf) {
                                return Some((ci, e));
                            }
                        }
                        None
                    })
                })
                .collect();
            for h in handles {
                if let Some(err) = h.join().expect("model eval worker panicked") {
                    failures.push(err);
                }
            }
        });
        // Deterministic error selection: earliest chunk wins.
        failures.sort_by_key(|(ci, _)| *ci);
        if let Some((_, e)) = failures.into_iter().next() {
            return Err(e);
        }
        Ok(out)
    }

    fn forward_rows(
        &self,
        params: &ModelParams,
        batch: &DenseMatrix,
        rows: std::ops::Range<usize>,
        out: &mut [f64],
    ) -> Result<()> {
        let l = self.spec.output_modes;
        let feature_dim = self.spec.feature_dim();
        let mut feat = vec![0.0; feature_dim];
        let heads: Vec<Vec<LayerView>> = match self.spec.head_mode {
            HeadMode::DisjointHeads => (0..l).map(|h| self.layer_views(params, Some(h))).collect(),
            HeadMode::SharedTrunk => vec![self.layer_views(params, None)],
            HeadMode::Tabular { .. } => unreachable!("tabular handled in forward"),
        };
        let max_width = heads
            .iter()
            .flat_map(|layers| layers.iter().map(|lv| lv.fan_out.max(lv.fan_in)))
            .max()
            .unwrap_or(1)
            .max(feature_dim);
        let mut cur = vec![0.0; max_width];
        let mut next = vec![0.0; max_width];

        for b in rows.clone() {
            match &self.fourier {
                Some(map) => map.features_into(batch.row(b), &mut feat),
                None => feat.copy_from_slice(batch.row(b)),
            }
            let out_row = &mut out[(b - rows.start) * l..(b - rows.start + 1) * l];
            match self.spec.head_mode {
                HeadMode::DisjointHeads => {
                    for (h, layers) in heads.iter().enumerate() {
                        let y = run_layers(
                            layers,
                            &feat,
                            self.spec.activation,
                            &mut cur,
                            &mut next,
                            b,
                            Some(h),
                        )?;
                        out_row[h] = y[0];
                    }
                }
                HeadMode::SharedTrunk => {
                    let y = run_layers(
                        &heads[0],
                        &feat,
                        self.spec.activation,
                        &mut cur,
                        &mut next,
                        b,
                        None,
                    )?;
                    out_row.copy_from_slice(&y[..l]);
                }
                HeadMode::Tabular { .. } => unreachable!(),
            }
        }
        Ok(())
    }

    /// Accumulate `sum_{b,l} cotangent[b,l] * d f_l(x_b) / d theta` into a
    /// flat gradient vector.
    pub fn backward(
        &self,
        params: &ModelParams,
        batch: &DenseMatrix,
        cotangent: &FunctionBatch,
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let s = batch.rows();
        let l = self.spec.output_modes;
        if cotangent.rows() != s || cotangent.cols() != l {
            return Err(Error::ShapeMismatch {
                expected: format!("{s}x{l} cotangent"),
                got: format!("{}x{}", cotangent.rows(), cotangent.cols()),
            });
        }
        let mut grad = vec![0.0; params.values.len()];

        if let HeadMode::Tabular { num_points } = self.spec.head_mode {
            // The Jacobian of a table lookup is an indicator: scatter.
            for b in 0..s {
                let idx = self.table_index(batch.row(b)[0], num_points)?;
                for m in 0..l {
                    grad[idx * l + m] += cotangent.get(b, m);
                }
            }
            return Ok(grad);
        }

        let feature_dim = self.spec.feature_dim();
        let mut feat = vec![0.0; feature_dim];
        let head_specs: Vec<(Option<usize>, Vec<LayerView>)> = match self.spec.head_mode {
            HeadMode::DisjointHeads => {
                (0..l).map(|h| (Some(h), self.layer_views(params, Some(h)))).collect()
            }
            HeadMode::SharedTrunk => vec![(None, self.layer_views(params, None))],
            HeadMode::Tabular { .. } => unreachable!(),
        };
        // Segment offsets per head, in layer order.
        let seg_offsets: Vec<Vec<(usize, usize)>> = head_specs
            .iter()
            .map(|(head, _)| {
                let mut pairs = Vec::new();
                let mut w_off = 0;
                for seg in &params.layout.segments {
                    if seg.head != *head {
                        continue;
                    }
                    match seg.kind {
                        SegmentKind::Weight => w_off = seg.offset,
                        SegmentKind::Bias => pairs.push((w_off, seg.offset)),
                        SegmentKind::Table => {}
                    }
                }
                pairs
            })
            .collect();

        for b in 0..s {
            match &self.fourier {
                Some(map) => map.features_into(batch.row(b), &mut feat),
                None => feat.copy_from_slice(batch.row(b)),
            }
            for ((head, layers), offsets) in head_specs.iter().zip(&seg_offsets) {
                let mut dz: Vec<f64> = match head {
                    Some(h) => vec![cotangent.get(b, *h)],
                    None => (0..l).map(|m| cotangent.get(b, m)).collect(),
                };
                if dz.iter().all(|&g| g == 0.0) {
                    continue;
                }
                // Forward pass storing pre-activations and activations.
                let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
                let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
                acts.push(feat.clone());
                for (k, layer) in layers.iter().enumerate() {
                    let input = acts.last().unwrap();
                    let mut z = vec![0.0; layer.fan_out];
                    linear_into(layer, input, &mut z);
                    check_finite_layer(&z, b, k, *head)?;
                    let is_output = k + 1 == layers.len();
                    let a = if is_output { z.clone() } else { activate(&z, self.spec.activation) };
                    pre.push(z);
                    acts.push(a);
                }
                // Reverse sweep.
                for k in (0..layers.len()).rev() {
                    let layer = &layers[k];
                    if k + 1 != layers.len() {
                        // dz holds dA here; fold in the activation derivative.
                        activate_grad_inplace(&mut dz, &pre[k], self.spec.activation);
                    }
                    let (w_off, b_off) = offsets[k];
                    let input = &acts[k];
                    for r in 0..layer.fan_out {
                        let g = dz[r];
                        if g != 0.0 {
                            let wrow =
                                &mut grad[w_off + r * layer.fan_in..w_off + (r + 1) * layer.fan_in];
                            for (wg, x) in wrow.iter_mut().zip(input) {
                                *wg += g * x;
                            }
                        }
                        grad[b_off + r] += g;
                    }
                    if k > 0 {
                        let mut dx = vec![0.0; layer.fan_in];
                        for r in 0..layer.fan_out {
                            let g = dz[r];
                            if g == 0.0 {
                                continue;
                            }
                            let wrow = &layer.weight[r * layer.fan_in..(r + 1) * layer.fan_in];
                            for (d, w) in dx.iter_mut().zip(wrow) {
                                *d += g * w;
                            }
                        }
                        dz = dx;
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn linear_into(layer: &LayerView, input: &[f64], out: &mut [f64]) {
    for r in 0..layer.fan_out {
        let wrow = &layer.weight[r * layer.fan_in..(r + 1) * layer.fan_in];
        let mut acc = layer.bias[r];
        for (w, x) in wrow.iter().zip(input) {
            acc += w * x;
        }
        out[r] = acc;
    }
}

/// Overflow-safe softplus: max(x, 0) + log1p(exp(-|x|)).
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn activate(z: &[f64], act: Activation) -> Vec<f64> {
    match act {
        Activation::Softplus => z.iter().map(|&x| softplus(x)).collect(),
        Activation::SinCos => {
            let half = z.len() / 2;
            z.iter()
                .enumerate()
                .map(|(i, &x)| if i < half { x.sin() } else { x.cos() })
                .collect()
        }
    }
}

fn activate_grad_inplace(da: &mut [f64], z: &[f64], act: Activation) {
    match act {
        Activation::Softplus => {
            for (d, &x) in da.iter_mut().zip(z) {
                *d *= sigmoid(x);
            }
        }
        Activation::SinCos => {
            let half = z.len() / 2;
            for (i, (d, &x)) in da.iter_mut().zip(z).enumerate() {
                *d *= if i < half { x.cos() } else { -x.sin() };
            }
        }
    }
}

fn check_finite_layer(z: &[f64], sample: usize, layer: usize, head: Option<usize>) -> Result<()> {
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        let what = match head {
            Some(h) => format!("layer {layer} activation (head {h}, sample {sample}, unit {i})"),
            None => format!("layer {layer} activation (sample {sample}, unit {i})"),
        };
        return Err(Error::NonFinite { what, index: i });
    }
    Ok(())
}

fn run_layers<'a>(
    layers: &[LayerView],
    feat: &[f64],
    act: Activation,
    cur: &'a mut [f64],
    next: &'a mut [f64],
    sample: usize,
    head: Option<usize>,
) -> Result<&'a [f64]> {
    cur[..feat.len()].copy_from_slice(feat);
    let mut in_len = feat.len();
    let mut use_cur = true;
    for (k, layer) in layers.iter().enumerate() {
        let (src, dst): (&[f64], &mut [f64]) = if use_cur {
            (&cur[..in_len], &mut next[..layer.fan_out])
        } else {
            (&next[..in_len], &mut cur[..layer.fan_out])
        };
        linear_into(layer, src, dst);
        check_finite_layer(dst, sample, k, head)?;
        if k + 1 != layers.len() {
            match act {
                Activation::Softplus => {
                    for v in dst.iter_mut() {
                        *v = softplus(*v);
                    }
                }
                Activation::SinCos => {
                    let half = dst.len() / 2;
                    for (i, v) in dst.iter_mut().enumerate() {
                        *v = if i < half { v.sin() } else { v.cos() };
                    }
                }
            }
        }
        in_len = layer.fan_out;
        use_cur = !use_cur;
    }
    Ok(if use_cur { &cur[..in_len] } else { &next[..in_len] })
}

/// Evaluate `spec` with `params` on `batch`. Convenience wrapper that builds
/// the feature map on the fly; hot paths should hold a [`CompiledModel`].
pub fn model_forward(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &DenseMatrix,
) -> Result<FunctionBatch> {
    CompiledModel::new(spec.clone())?.forward(params, batch)
}

/// Contract per-sample cotangents against the parameter Jacobian:
/// returns `sum_{b,l} cotangent[b,l] * d f_l(x_b)/d theta`.
pub fn model_backward(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &DenseMatrix,
    cotangent: &FunctionBatch,
) -> Result<Vec<f64>> {
    CompiledModel::new(spec.clone())?.backward(params, batch, cotangent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mlp_spec(heads: HeadMode, hidden: Vec<usize>, act: Activation) -> ModelSpec {
        ModelSpec {
            input_dim: 2,
            output_modes: 3,
            head_mode: heads,
            hidden_widths: hidden,
            activation: act,
            fourier: None,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, s: usize, d: usize) -> DenseMatrix {
        DenseMatrix::from_fn(s, d, |_, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let spec = mlp_spec(HeadMode::DisjointHeads, vec![8, 8], Activation::Softplus);
        let params = ModelParams { values: vec![0.0; spec.param_count()], layout: spec.layout() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, 5, 2);
        let out = model_forward(&params, &spec, &batch).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn tabular_forward_is_lookup_and_backward_is_scatter() {
        let spec = ModelSpec {
            input_dim: 1,
            output_modes: 2,
            head_mode: HeadMode::Tabular { num_points: 4 },
            hidden_widths: vec![],
            activation: Activation::Softplus,
            fourier: None,
        };
        let table: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let params = ModelParams { values: table, layout: spec.layout() };
        let batch = DenseMatrix::new(3, 1, vec![2.0, 0.0, 3.0]).unwrap();
        let out = model_forward(&params, &spec, &batch).unwrap();
        assert_eq!(out.row(0), &[4.0, 5.0]);
        assert_eq!(out.row(1), &[0.0, 1.0]);
        assert_eq!(out.row(2), &[6.0, 7.0]);

        let cot = DenseMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let grad = model_backward(&params, &spec, &batch, &cot).unwrap();
        assert_eq!(grad, vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0, 5.0, 6.0]);

        let bad = DenseMatrix::new(1, 1, vec![9.0]).unwrap();
        assert!(model_forward(&params, &spec, &bad).is_err());
    }

    #[test]
    fn single_linear_layer_is_matrix_product() {
        let spec = ModelSpec {
            input_dim: 2,
            output_modes: 2,
            head_mode: HeadMode::SharedTrunk,
            hidden_widths: vec![],
            activation: Activation::Softplus,
            fourier: None,
        };
        // W = [[1, 2], [3, 4]], b = (0.5, -0.5)
        let params =
            ModelParams { values: vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5], layout: spec.layout() };
        let batch = DenseMatrix::new(1, 2, vec![10.0, 100.0]).unwrap();
        let out = model_forward(&params, &spec, &batch).unwrap();
        assert!((out.get(0, 0) - 210.5).abs() < 1e-12);
        assert!((out.get(0, 1) - 429.5).abs() < 1e-12);
    }

    #[test]
    fn fourier_feature_values() {
        let proj = DenseMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let map = FourierFeatureMap::from_projection(proj, true);
        let x = DenseMatrix::new(1, 2, vec![std::f64::consts::FRAC_PI_2, 7.0]).unwrap();
        let f = fourier_features(&map, &x).unwrap();
        assert!(f.get(0, 0).abs() < 1e-15); // cos(pi/2)
        assert!((f.get(0, 1) - 1.0).abs() < 1e-15); // sin(pi/2)
        assert!((f.get(0, 2) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((f.get(0, 3) - 7.0).abs() < 1e-15);

        let zero = DenseMatrix::zeros(1, 2);
        let f0 = fourier_features(&map, &zero).unwrap();
        assert_eq!(f0.get(0, 0), 1.0);
        assert_eq!(f0.get(0, 1), 0.0);
        assert_eq!(f0.get(0, 2), 0.0);
    }

    #[test]
    fn fourier_pairs_satisfy_trig_identity() {
        let desc =
            FourierDescriptor { num_features: 16, scale: 0.5, append_raw_input: false, seed: 3 };
        let map = FourierFeatureMap::from_descriptor(&desc, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 10, 2);
        let f = fourier_features(&map, &batch).unwrap();
        for b in 0..10 {
            for k in 0..16 {
                let c = f.get(b, k);
                let s = f.get(b, 16 + k);
                assert!((c * c + s * s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_fan_in_scaled() {
        let spec = ModelSpec {
            input_dim: 2,
            output_modes: 1,
            head_mode: HeadMode::SharedTrunk,
            hidden_widths: vec![128, 100],
            activation: Activation::Softplus,
            fourier: Some(FourierDescriptor {
                num_features: 63,
                scale: 1.0,
                append_raw_input: true,
                seed: 1,
            }),
        };
        let a = init_params(&spec, 9).unwrap();
        let b = init_params(&spec, 9).unwrap();
        assert_eq!(a.values, b.values);

        // Layer 1 has fan-in 128 and 100*128 = 12800 draws.
        let seg = a
            .layout
            .segments
            .iter()
            .find(|s| s.kind == SegmentKind::Weight && s.layer == 1)
            .unwrap();
        assert_eq!(seg.cols, 128);
        let w = &a.values[seg.offset..seg.offset + seg.len()];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let target = 1.0 / (128.0f64).sqrt();
        assert!((var.sqrt() - target).abs() < 0.2 * target, "std {} vs {target}", var.sqrt());
    }

    #[test]
    fn tabular_init_matches_stated_rule() {
        let spec = ModelSpec {
            input_dim: 1,
            output_modes: 4,
            head_mode: HeadMode::Tabular { num_points: 5000 },
            hidden_widths: vec![],
            activation: Activation::Softplus,
            fourier: None,
        };
        let p = init_params(&spec, 2).unwrap();
        let mean = p.values.iter().sum::<f64>() / p.values.len() as f64;
        let var =
            p.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.values.len() as f64;
        assert!((var - 0.25).abs() < 0.02, "table variance {var} should be 1/L = 0.25");
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let spec = mlp_spec(HeadMode::DisjointHeads, vec![6], Activation::SinCos);
        let params = init_params(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = random_batch(&mut rng, 4, 2);
        let grad = model_backward(&params, &spec, &batch, &DenseMatrix::zeros(4, 3)).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    /// Central finite difference of J(theta) = sum(cotangent . forward(theta))
    /// along direction u.
    fn directional_fd(
        spec: &ModelSpec,
        params: &ModelParams,
        batch: &DenseMatrix,
        cot: &DenseMatrix,
        u: &[f64],
        eps: f64,
    ) -> f64 {
        let eval = |vals: Vec<f64>| -> f64 {
            let p = ModelParams { values: vals, layout: params.layout.clone() };
            let out = model_forward(&p, spec, batch).unwrap();
            out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
        };
        let plus: Vec<f64> = params.values.iter().zip(u).map(|(v, du)| v + eps * du).collect();
        let minus: Vec<f64> = params.values.iter().zip(u).map(|(v, du)| v - eps * du).collect();
        (eval(plus) - eval(minus)) / (2.0 * eps)
    }

    #[test]
    fn gradients_match_finite_differences_on_all_architectures() {
        let specs = vec![
            mlp_spec(HeadMode::DisjointHeads, vec![8, 6], Activation::Softplus),
            mlp_spec(HeadMode::SharedTrunk, vec![10], Activation::Softplus),
            mlp_spec(HeadMode::DisjointHeads, vec![8], Activation::SinCos),
            ModelSpec {
                fourier: Some(FourierDescriptor {
                    num_features: 5,
                    scale: 0.3,
                    append_raw_input: true,
                    seed: 11,
                }),
                ..mlp_spec(HeadMode::SharedTrunk, vec![8, 8], Activation::Softplus)
            },
            ModelSpec {
                input_dim: 1,
                output_modes: 3,
                head_mode: HeadMode::Tabular { num_points: 6 },
                hidden_widths: vec![],
                activation: Activation::Softplus,
                fourier: None,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for (si, spec) in specs.iter().enumerate() {
            for trial in 0..4u64 {
                let params = init_params(spec, 100 + trial).unwrap();
                let batch = match spec.head_mode {
                    HeadMode::Tabular { num_points } => DenseMatrix::from_fn(5, 1, |b, _| {
                        ((b * 2 + trial as usize) % num_points) as f64
                    }),
                    _ => random_batch(&mut rng, 5, spec.input_dim),
                };
                let cot =
                    DenseMatrix::from_fn(5, spec.output_modes, |_, _| rng.gen_range(-1.0..1.0));
                let grad = model_backward(&params, spec, &batch, &cot).unwrap();
                let u: Vec<f64> = (0..grad.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let analytic: f64 = grad.iter().zip(&u).map(|(g, du)| g * du).sum();
                let fd = directional_fd(spec, &params, &batch, &cot, &u, 1e-5);
                let denom = analytic.abs().max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom < 1e-5,
                    "spec {si} trial {trial}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn disjoint_heads_are_isolated() {
        let spec = mlp_spec(HeadMode::DisjointHeads, vec![8, 8], Activation::Softplus);
        let params = init_params(&spec, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let batch = random_batch(&mut rng, 6, 2);
        let base = model_forward(&params, &spec, &batch).unwrap();

        let mut perturbed = params.clone();
        let range = perturbed.layout.head_range(1);
        for v in &mut perturbed.values[range] {
            *v += 0.37;
        }
        let out = model_forward(&perturbed, &spec, &batch).unwrap();
        for b in 0..6 {
            for m in 0..3 {
                if m == 1 {
                    continue;
                }
                assert_eq!(base.get(b, m).to_bits(), out.get(b, m).to_bits());
            }
        }
        assert!((0..6).any(|b| base.get(b, 1) != out.get(b, 1)));
    }

    #[test]
    fn forward_bitwise_independent_of_thread_count() {
        let spec = ModelSpec {
            fourier: Some(FourierDescriptor {
                num_features: 9,
                scale: 0.2,
                append_raw_input: true,
                seed: 31,
            }),
            ..mlp_spec(HeadMode::DisjointHeads, vec![12], Activation::Softplus)
        };
        let params = init_params(&spec, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let batch = random_batch(&mut rng, 300, 2);
        set_eval_threads(1);
        let a = model_forward(&params, &spec, &batch).unwrap();
        set_eval_threads(4);
        let b = model_forward(&params, &spec, &batch).unwrap();
        set_eval_threads(1);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forward_reports_nan_layer() {
        let spec = mlp_spec(HeadMode::SharedTrunk, vec![4], Activation::Softplus);
        let mut params = init_params(&spec, 41).unwrap();
        params.values[0] = f64::NAN;
        let batch = DenseMatrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        match model_forward(&params, &spec, &batch) {
            Err(Error::NonFinite { what, .. }) => assert!(what.contains("layer 0"), "{what}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
