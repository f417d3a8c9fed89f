//! Pattern fitting for PatternNet / PatternAttribution.
//!
//! For every linear unit the signal direction is estimated from data as
//! `a_j = cov(x, y_j) / (w_j^T cov(x, y_j))`, with the covariance taken over
//! the positive regime (`y_j > 0`) when the layer feeds a relu, and over all
//! samples otherwise. The statistics are streamed: accumulators hold running
//! sums only, so shards can be merged field-wise and fitting never needs a
//! second pass over the data.
//!
//! Conv layers share their weights across spatial positions, so every output
//! window contributes one (patch, pre-activation) sample to the unit of its
//! output channel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv::ConvGeom;
use crate::forward::forward;
use crate::model::{load_tensor_blob, LayerSpec, Model, TensorEntry};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("no pattern fitted for linear layer {layer_index}")]
    MissingLayer { layer_index: usize },
    #[error("pattern for layer {layer_index} has shape {got:?}, expected {expected:?}")]
    Shape {
        layer_index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("statistics do not match the model: {0}")]
    ModelMismatch(String),
    #[error("pattern manifest parse error: {0}")]
    Parse(String),
    #[error("pattern file: {0}")]
    Load(#[from] crate::model::ModelError),
    #[error(transparent)]
    Forward(#[from] crate::forward::ForwardError),
}

/// Threshold under which `w^T c` counts as vanishing and the unit is marked
/// degenerate, relative to `||c|| * ||w||`.
const DEGENERATE_REL_TOL: f64 = 1e-12;

/// Streaming moments for one linear layer.
///
/// `in_dim` is the patch length for conv layers. Positive-regime sums are
/// kept per unit because each unit fires on its own subset of the samples.
#[derive(Debug, Clone)]
struct LayerStats {
    in_dim: usize,
    out_dim: usize,
    relu_next: bool,
    n_all: u64,
    sum_x_all: Vec<f64>,
    sum_y_all: Vec<f64>,
    sum_xy_all: Vec<f64>,
    n_pos: Vec<u64>,
    sum_x_pos: Vec<f64>,
    sum_y_pos: Vec<f64>,
    sum_xy_pos: Vec<f64>,
}

impl LayerStats {
    fn new(in_dim: usize, out_dim: usize, relu_next: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            relu_next,
            n_all: 0,
            sum_x_all: vec![0.0; in_dim],
            sum_y_all: vec![0.0; out_dim],
            sum_xy_all: vec![0.0; out_dim * in_dim],
            n_pos: vec![0; out_dim],
            sum_x_pos: vec![0.0; out_dim * in_dim],
            sum_y_pos: vec![0.0; out_dim],
            sum_xy_pos: vec![0.0; out_dim * in_dim],
        }
    }

    fn record(&mut self, x: &[f64], y: &[f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        self.n_all += 1;
        for (i, &xi) in x.iter().enumerate() {
            self.sum_x_all[i] += xi;
        }
        for (j, &yj) in y.iter().enumerate() {
            self.sum_y_all[j] += yj;
            let row = &mut self.sum_xy_all[j * self.in_dim..(j + 1) * self.in_dim];
            for (i, &xi) in x.iter().enumerate() {
                row[i] += xi * yj;
            }
            if yj > 0.0 {
                self.n_pos[j] += 1;
                self.sum_y_pos[j] += yj;
                let xrow = &mut self.sum_x_pos[j * self.in_dim..(j + 1) * self.in_dim];
                let xyrow = &mut self.sum_xy_pos[j * self.in_dim..(j + 1) * self.in_dim];
                for (i, &xi) in x.iter().enumerate() {
                    xrow[i] += xi;
                    xyrow[i] += xi * yj;
                }
            }
        }
    }

    fn merge(&mut self, other: &LayerStats) {
        self.n_all += other.n_all;
        add_assign(&mut self.sum_x_all, &other.sum_x_all);
        add_assign(&mut self.sum_y_all, &other.sum_y_all);
        add_assign(&mut self.sum_xy_all, &other.sum_xy_all);
        for (a, b) in self.n_pos.iter_mut().zip(&other.n_pos) {
            *a += b;
        }
        add_assign(&mut self.sum_x_pos, &other.sum_x_pos);
        add_assign(&mut self.sum_y_pos, &other.sum_y_pos);
        add_assign(&mut self.sum_xy_pos, &other.sum_xy_pos);
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Streaming pattern statistics for every linear layer of one model.
#[derive(Debug, Clone)]
pub struct PatternStats {
    layers: BTreeMap<usize, LayerStats>,
    samples_seen: u64,
}

impl PatternStats {
    pub fn new(model: &Model) -> Self {
        let mut layers = BTreeMap::new();
        for (index, layer) in model.layers.iter().enumerate() {
            let relu_next = matches!(model.layers.get(index + 1), Some(LayerSpec::Relu));
            match layer {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => {
                    layers.insert(index, LayerStats::new(*in_features, *out_features, relu_next));
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => {
                    layers.insert(
                        index,
                        LayerStats::new(in_channels * kernel_h * kernel_w, *out_channels, relu_next),
                    );
                }
                _ => {}
            }
        }
        Self {
            layers,
            samples_seen: 0,
        }
    }

    /// Model inputs processed so far.
    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    /// Runs the forward pass on every batch item and updates the running
    /// moments of each linear layer's (input, pre-activation) pairs.
    pub fn accumulate(&mut self, model: &Model, batch: &[Tensor]) -> Result<(), PatternError> {
        for x in batch {
            let (_, tape) = forward(model, x)?;
            for entry in &tape.entries {
                let Some(stats) = self.layers.get_mut(&entry.layer_index) else {
                    continue;
                };
                match &model.layers[entry.layer_index] {
                    LayerSpec::Dense { .. } => {
                        if entry.input.len() != stats.in_dim || entry.output.len() != stats.out_dim
                        {
                            return Err(PatternError::ModelMismatch(format!(
                                "layer {} dims changed",
                                entry.layer_index
                            )));
                        }
                        stats.record(entry.input.data(), entry.output.data());
                    }
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel_h,
                        kernel_w,
                        stride,
                        padding,
                        ..
                    } => {
                        let geom = ConvGeom::new(
                            entry.input.shape(),
                            *out_channels,
                            *kernel_h,
                            *kernel_w,
                            *stride,
                            *padding,
                        );
                        let windows = geom.windows();
                        let mut patch = vec![0.0; geom.patch_len()];
                        let mut y = vec![0.0; geom.out_ch];
                        for p in 0..windows {
                            geom.gather_patch(entry.input.data(), p, &mut patch);
                            for (o, slot) in y.iter_mut().enumerate() {
                                *slot = entry.output.at(o * windows + p);
                            }
                            stats.record(&patch, &y);
                        }
                    }
                    _ => unreachable!("stats exist only for linear layers"),
                }
            }
            self.samples_seen += 1;
        }
        Ok(())
    }

    /// Field-wise sum of two accumulators built on disjoint data shards.
    pub fn merge(&mut self, other: &PatternStats) -> Result<(), PatternError> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|((ia, a), (ib, b))| ia != ib || a.in_dim != b.in_dim || a.out_dim != b.out_dim)
        {
            return Err(PatternError::ModelMismatch(
                "accumulators were built for different models".into(),
            ));
        }
        for (index, stats) in self.layers.iter_mut() {
            stats.merge(&other.layers[index]);
        }
        self.samples_seen += other.samples_seen;
        Ok(())
    }

    /// Closes the estimator: `a_j = c / (w_j^T c)` with
    /// `c = E[x y_j] - E[x] E[y_j]` over the unit's regime. Vanishing
    /// denominators yield a zero pattern and a degenerate-unit record instead
    /// of an error.
    pub fn finalize(&self, model: &Model) -> Result<Patterns, PatternError> {
        let mut layers = BTreeMap::new();
        for (&index, stats) in &self.layers {
            let w = match &model.layers[index] {
                LayerSpec::Dense { weight_ref, .. } | LayerSpec::Conv2d { weight_ref, .. } => {
                    model.tensor(weight_ref)
                }
                _ => unreachable!("stats exist only for linear layers"),
            };
            let (in_dim, out_dim) = (stats.in_dim, stats.out_dim);
            let mut a = vec![0.0; w.len()];
            let mut degenerate_units = Vec::new();
            let mut c = vec![0.0; in_dim];
            for j in 0..out_dim {
                let n = if stats.relu_next {
                    stats.n_pos[j]
                } else {
                    stats.n_all
                };
                let w_col = |i: usize| match &model.layers[index] {
                    LayerSpec::Dense { .. } => w.at(i * out_dim + j),
                    _ => w.at(j * in_dim + i),
                };
                if n < 2 {
                    degenerate_units.push(j);
                    continue;
                }
                let nf = n as f64;
                let (sx, sy, sxy) = if stats.relu_next {
                    (
                        &stats.sum_x_pos[j * in_dim..(j + 1) * in_dim],
                        stats.sum_y_pos[j],
                        &stats.sum_xy_pos[j * in_dim..(j + 1) * in_dim],
                    )
                } else {
                    (
                        &stats.sum_x_all[..],
                        stats.sum_y_all[j],
                        &stats.sum_xy_all[j * in_dim..(j + 1) * in_dim],
                    )
                };
                let ey = sy / nf;
                for i in 0..in_dim {
                    c[i] = sxy[i] / nf - (sx[i] / nf) * ey;
                }
                let mut dot = 0.0;
                let mut c_norm2 = 0.0;
                let mut w_norm2 = 0.0;
                for (i, &ci) in c.iter().enumerate() {
                    let wi = w_col(i);
                    dot += wi * ci;
                    c_norm2 += ci * ci;
                    w_norm2 += wi * wi;
                }
                if dot.abs() <= DEGENERATE_REL_TOL * c_norm2.sqrt() * w_norm2.sqrt() {
                    degenerate_units.push(j);
                    continue;
                }
                match &model.layers[index] {
                    LayerSpec::Dense { .. } => {
                        for (i, &ci) in c.iter().enumerate() {
                            a[i * out_dim + j] = ci / dot;
                        }
                    }
                    _ => {
                        for (i, &ci) in c.iter().enumerate() {
                            a[j * in_dim + i] = ci / dot;
                        }
                    }
                }
            }
            layers.insert(
                index,
                PatternLayer {
                    a: Tensor::new(w.shape().to_vec(), a).expect("pattern shape"),
                    degenerate_units,
                },
            );
        }
        Ok(Patterns { layers })
    }
}

/// Fitted signal direction for one linear layer, same shape as its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternLayer {
    pub a: Tensor,
    /// Units whose estimator denominator vanished; their pattern column is
    /// zero.
    pub degenerate_units: Vec<usize>,
}

/// Fitted patterns for every linear layer of a model, keyed by layer index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Patterns {
    layers: BTreeMap<usize, PatternLayer>,
}

impl Patterns {
    pub fn layer(&self, layer_index: usize) -> Option<&PatternLayer> {
        self.layers.get(&layer_index)
    }

    pub fn layer_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    pub fn insert(&mut self, layer_index: usize, layer: PatternLayer) {
        self.layers.insert(layer_index, layer);
    }

    /// Checks that every linear layer of `model` has a pattern of the right
    /// shape.
    pub fn validate_for(&self, model: &Model) -> Result<(), PatternError> {
        for index in model.linear_layer_indices() {
            let layer = self
                .layers
                .get(&index)
                .ok_or(PatternError::MissingLayer { layer_index: index })?;
            let expected = match &model.layers[index] {
                LayerSpec::Dense { weight_ref, .. } | LayerSpec::Conv2d { weight_ref, .. } => {
                    model.tensor(weight_ref).shape().to_vec()
                }
                _ => unreachable!(),
            };
            if layer.a.shape() != expected.as_slice() {
                return Err(PatternError::Shape {
                    layer_index: index,
                    expected,
                    got: layer.a.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PatternManifestDoc {
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    degenerate: BTreeMap<String, Vec<usize>>,
}

fn pattern_tensor_name(layer_index: usize) -> String {
    format!("pattern_{layer_index}")
}

/// Serializes patterns into the same manifest + blob format as model
/// weights, tensor names `pattern_<layer_index>`.
pub fn save_patterns(patterns: &Patterns) -> (String, Vec<u8>) {
    let mut entries = BTreeMap::new();
    let mut degenerate = BTreeMap::new();
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (&index, layer) in &patterns.layers {
        entries.insert(
            pattern_tensor_name(index),
            TensorEntry {
                dtype: crate::model::Dtype::F64,
                shape: layer.a.shape().to_vec(),
                offset,
            },
        );
        if !layer.degenerate_units.is_empty() {
            degenerate.insert(index.to_string(), layer.degenerate_units.clone());
        }
        for v in layer.a.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += layer.a.len();
    }
    let doc = PatternManifestDoc {
        tensors: entries,
        degenerate,
    };
    let manifest = serde_json::to_string_pretty(&doc).expect("pattern manifest serialization");
    (manifest, blob)
}

/// Loads patterns and checks them against the model's linear layers.
pub fn load_patterns(
    manifest_text: &[u8],
    blob: &[u8],
    model: &Model,
) -> Result<Patterns, PatternError> {
    let doc: PatternManifestDoc =
        serde_json::from_slice(manifest_text).map_err(|e| PatternError::Parse(e.to_string()))?;
    let mut layers = BTreeMap::new();
    for index in model.linear_layer_indices() {
        let name = pattern_tensor_name(index);
        let entry = doc
            .tensors
            .get(&name)
            .ok_or(PatternError::MissingLayer { layer_index: index })?;
        let a = load_tensor_blob(&name, entry, blob)?;
        let degenerate_units = doc
            .degenerate
            .get(&index.to_string())
            .cloned()
            .unwrap_or_default();
        layers.insert(
            index,
            PatternLayer {
                a,
                degenerate_units,
            },
        );
    }
    let patterns = Patterns { layers };
    patterns.validate_for(model)?;
    Ok(patterns)
}
