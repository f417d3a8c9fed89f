//! Sequential model description: manifest parsing, weight-blob decoding,
//! structural validation, and batchnorm folding.
//!
//! The on-disk format is a UTF-8 JSON manifest plus a raw little-endian
//! weight blob. Tensor offsets in the manifest are expressed in *elements* of
//! the declared dtype, not bytes. Weights may be stored as `f32` or `f64`;
//! the engine always computes in `f64`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub mod builder;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("tensor {name:?}: offset {offset} + {count} elements of {dtype} exceeds blob of {blob_len} bytes")]
    BlobTruncated {
        name: String,
        offset: usize,
        count: usize,
        dtype: Dtype,
        blob_len: usize,
    },
    #[error("tensor {name:?}: element count overflows")]
    ElementCountOverflow { name: String },
    #[error("tensor {name:?}: {source}")]
    BadTensor {
        name: String,
        source: crate::tensor::TensorError,
    },
    #[error("model is invalid:\n{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| format!("  - {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One structural violation found by [`validate_model`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Index into `Model::layers`, when the problem is tied to one layer.
    pub layer_index: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer_index {
            Some(i) => write!(f, "layer {}: {}", i, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Manifest record describing where one tensor lives in the blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offset into the blob in elements of `dtype`.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// One layer of the sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
        weight_ref: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_ref: Option<String>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
        weight_ref: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_ref: Option<String>,
    },
    Maxpool2d {
        window_h: usize,
        window_w: usize,
        stride: usize,
    },
    Avgpool2d {
        window_h: usize,
        window_w: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Batchnorm {
        scale_ref: String,
        shift_ref: String,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::Avgpool2d { .. } => "avgpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Dense and conv2d layers carry weights and take part in attribution
    /// rules for linear maps.
    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// JSON document at the top of a model file.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ManifestDoc {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A validated sequential network bound to its weight tensors.
///
/// Immutable after [`load_model`]; batchnorm layers have already been folded
/// into the preceding linear layer, so consumers only ever see
/// dense/conv/pool/relu/flatten/softmax.
#[derive(Debug, Clone)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Model {
    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    /// Indices of the dense/conv2d layers, in network order.
    pub fn linear_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_linear())
            .map(|(i, _)| i)
            .collect()
    }

    /// Output shape of every layer, starting with the model input shape.
    /// Index i+1 holds the output shape of layer i.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>, Diagnostic> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer_output_shape(layer, shapes.last().unwrap()).map_err(|message| {
                Diagnostic {
                    layer_index: Some(i),
                    message,
                }
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }
}

/// Symbolic output shape of a single layer, or a human-readable reason why
/// the input shape does not fit.
pub fn layer_output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>, String> {
    match layer {
        LayerSpec::Dense {
            in_features,
            out_features,
            ..
        } => {
            if input != [*in_features] {
                return Err(format!(
                    "dense expects input shape [{in_features}], got {input:?}"
                ));
            }
            Ok(vec![*out_features])
        }
        LayerSpec::Conv2d {
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_channels,
            ..
        } => {
            let [c, h, w] = rank3(input, "conv2d")?;
            if c != *in_channels {
                return Err(format!(
                    "conv2d expects {in_channels} input channels, got {c}"
                ));
            }
            let (oh, ow) = conv_output_hw(h, w, *kernel_h, *kernel_w, *stride, *padding)?;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerSpec::Maxpool2d {
            window_h,
            window_w,
            stride,
        }
        | LayerSpec::Avgpool2d {
            window_h,
            window_w,
            stride,
        } => {
            let [c, h, w] = rank3(input, layer.kind_name())?;
            let (oh, ow) = conv_output_hw(h, w, *window_h, *window_w, *stride, Padding::Valid)?;
            Ok(vec![c, oh, ow])
        }
        LayerSpec::Relu | LayerSpec::Batchnorm { .. } => Ok(input.to_vec()),
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::Softmax => {
            if input.len() != 1 {
                return Err(format!("softmax expects a rank-1 input, got {input:?}"));
            }
            Ok(input.to_vec())
        }
    }
}

fn rank3(input: &[usize], kind: &str) -> Result<[usize; 3], String> {
    match input {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(format!("{kind} expects a [channels, h, w] input, got {other:?}")),
    }
}

/// Output spatial dims for a window of (kh, kw) sliding with `stride`.
///
/// `same` padding pads with zeros so that out = ceil(in / stride), with the
/// extra cell on the bottom/right when the total padding is odd.
pub(crate) fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize), String> {
    if stride == 0 {
        return Err("stride must be at least 1".into());
    }
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(format!(
                    "window {kh}x{kw} does not fit in input {h}x{w} with valid padding"
                ));
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1))
        }
        Padding::Same => Ok((h.div_ceil(stride), w.div_ceil(stride))),
    }
}

/// Top/left zero-padding for `same` convolutions (bottom/right absorbs the
/// odd cell).
pub(crate) fn same_padding_before(in_dim: usize, k: usize, stride: usize) -> usize {
    let out = in_dim.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(in_dim);
    total / 2
}

/// Decodes one tensor from the blob per its manifest entry, widening `f32`
/// values to `f64`.
pub fn load_tensor_blob(name: &str, entry: &TensorEntry, blob: &[u8]) -> Result<Tensor, ModelError> {
    let count = entry
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ModelError::ElementCountOverflow {
            name: name.to_string(),
        })?;
    let elem = entry.dtype.size();
    let start = entry
        .offset
        .checked_mul(elem)
        .ok_or_else(|| ModelError::ElementCountOverflow {
            name: name.to_string(),
        })?;
    let end = count
        .checked_mul(elem)
        .and_then(|bytes| start.checked_add(bytes))
        .ok_or_else(|| ModelError::ElementCountOverflow {
            name: name.to_string(),
        })?;
    if end > blob.len() {
        return Err(ModelError::BlobTruncated {
            name: name.to_string(),
            offset: entry.offset,
            count,
            dtype: entry.dtype,
            blob_len: blob.len(),
        });
    }
    let bytes = &blob[start..end];
    let data: Vec<f64> = match entry.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
    };
    Tensor::new(entry.shape.clone(), data).map_err(|source| ModelError::BadTensor {
        name: name.to_string(),
        source,
    })
}

/// Parses a manifest + blob pair into a validated [`Model`] with batchnorm
/// layers folded into their preceding linear layer.
pub fn load_model(manifest_text: &[u8], blob: &[u8]) -> Result<Model, ModelError> {
    let doc: ManifestDoc =
        serde_json::from_slice(manifest_text).map_err(|e| ModelError::Parse(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, entry) in &doc.tensors {
        tensors.insert(name.clone(), load_tensor_blob(name, entry, blob)?);
    }
    let model = Model {
        input_shape: doc.input_shape,
        layers: doc.layers,
        tensors,
    };
    let diags = validate_model(&model);
    if !diags.is_empty() {
        return Err(ModelError::Invalid(diags));
    }
    let folded = fold_batchnorm(model);
    debug_assert!(validate_model(&folded).is_empty());
    Ok(folded)
}

/// Serializes a model back into a manifest + `f64` blob pair.
///
/// Offsets are assigned in tensor-name order, so the output is deterministic;
/// a load/save round trip of an `f64` model reproduces the blob exactly.
pub fn save_model(model: &Model) -> (String, Vec<u8>) {
    let mut entries = BTreeMap::new();
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in &model.tensors {
        entries.insert(
            name.clone(),
            TensorEntry {
                dtype: Dtype::F64,
                shape: tensor.shape().to_vec(),
                offset,
            },
        );
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.len();
    }
    let doc = ManifestDoc {
        input_shape: model.input_shape.clone(),
        layers: model.layers.clone(),
        tensors: entries,
    };
    let manifest = serde_json::to_string_pretty(&doc).expect("manifest serialization");
    (manifest, blob)
}

/// Collects every structural violation instead of failing on the first one.
pub fn validate_model(model: &Model) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut shape = model.input_shape.clone();
    if model.input_shape.is_empty() || model.input_shape.contains(&0) {
        diags.push(Diagnostic {
            layer_index: None,
            message: format!("input_shape {:?} must be non-empty with positive dims", model.input_shape),
        });
        return diags;
    }
    let mut chain_broken = false;
    for (i, layer) in model.layers.iter().enumerate() {
        check_layer_tensors(model, i, layer, &mut diags);
        if let LayerSpec::Softmax = layer {
            if i + 1 != model.layers.len() {
                diags.push(Diagnostic {
                    layer_index: Some(i),
                    message: "softmax must be final".into(),
                });
            }
        }
        if let LayerSpec::Batchnorm { .. } = layer {
            let follows_linear = i > 0 && model.layers[i - 1].is_linear();
            if !follows_linear {
                diags.push(Diagnostic {
                    layer_index: Some(i),
                    message: "batchnorm must immediately follow a dense or conv2d layer".into(),
                });
            }
        }
        if !chain_broken {
            match layer_output_shape(layer, &shape) {
                Ok(next) => shape = next,
                Err(message) => {
                    // Later shapes are unknowable once the chain breaks.
                    chain_broken = true;
                    diags.push(Diagnostic {
                        layer_index: Some(i),
                        message,
                    });
                }
            }
        }
    }
    diags
}

fn check_layer_tensors(model: &Model, index: usize, layer: &LayerSpec, diags: &mut Vec<Diagnostic>) {
    let mut expect = |name: &str, expected_shape: Option<Vec<usize>>, role: &str| match model
        .tensors
        .get(name)
    {
        None => diags.push(Diagnostic {
            layer_index: Some(index),
            message: format!("{role} tensor {name:?} is not declared in the manifest"),
        }),
        Some(t) => {
            if let Some(expected) = expected_shape {
                if t.shape() != expected.as_slice() {
                    diags.push(Diagnostic {
                        layer_index: Some(index),
                        message: format!(
                            "{role} tensor {name:?} has shape {:?}, expected {:?} (rank {})",
                            t.shape(),
                            expected,
                            expected.len()
                        ),
                    });
                }
            }
        }
    };
    match layer {
        LayerSpec::Dense {
            in_features,
            out_features,
            weight_ref,
            bias_ref,
        } => {
            expect(weight_ref, Some(vec![*in_features, *out_features]), "weight");
            if let Some(b) = bias_ref {
                expect(b, Some(vec![*out_features]), "bias");
            }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            weight_ref,
            bias_ref,
            ..
        } => {
            expect(
                weight_ref,
                Some(vec![*out_channels, *in_channels, *kernel_h, *kernel_w]),
                "weight",
            );
            if let Some(b) = bias_ref {
                expect(b, Some(vec![*out_channels]), "bias");
            }
        }
        LayerSpec::Batchnorm {
            scale_ref,
            shift_ref,
        } => {
            // The per-channel affine must match the preceding linear layer's
            // width, otherwise folding is ill-defined.
            let channels = match index.checked_sub(1).map(|i| &model.layers[i]) {
                Some(LayerSpec::Dense { out_features, .. }) => Some(*out_features),
                Some(LayerSpec::Conv2d { out_channels, .. }) => Some(*out_channels),
                _ => None,
            };
            let expected = channels.map(|c| vec![c]);
            expect(scale_ref, expected.clone(), "scale");
            expect(shift_ref, expected, "shift");
        }
        _ => {}
    }
}

/// Folds every batchnorm into the linear layer before it: per output channel
/// c the affine `y = scale[c] * x + shift[c]` becomes `W' = scale[c] * W`,
/// `b' = scale[c] * b + shift[c]`.
fn fold_batchnorm(mut model: Model) -> Model {
    loop {
        let Some(bn_index) = model
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Batchnorm { .. }))
        else {
            return model;
        };
        let LayerSpec::Batchnorm {
            scale_ref,
            shift_ref,
        } = model.layers[bn_index].clone()
        else {
            unreachable!();
        };
        let scale = model.tensors[&scale_ref].clone();
        let shift = model.tensors[&shift_ref].clone();
        match model.layers[bn_index - 1].clone() {
            LayerSpec::Dense {
                out_features,
                weight_ref,
                bias_ref,
                in_features,
            } => {
                let w = &model.tensors[&weight_ref];
                let mut wd = w.data().to_vec();
                for i in 0..in_features {
                    for j in 0..out_features {
                        wd[i * out_features + j] *= scale.at(j);
                    }
                }
                let new_w = Tensor::new(w.shape().to_vec(), wd).unwrap();
                let mut bd = vec![0.0; out_features];
                if let Some(ref b) = bias_ref {
                    bd.copy_from_slice(model.tensors[b].data());
                }
                for (j, slot) in bd.iter_mut().enumerate() {
                    *slot = scale.at(j) * *slot + shift.at(j);
                }
                let bias_name = bias_ref.unwrap_or_else(|| fresh_bias_name(&model, bn_index - 1));
                model.tensors.insert(weight_ref.clone(), new_w);
                model
                    .tensors
                    .insert(bias_name.clone(), Tensor::from_vec(bd));
                model.layers[bn_index - 1] = LayerSpec::Dense {
                    in_features,
                    out_features,
                    weight_ref,
                    bias_ref: Some(bias_name),
                };
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                weight_ref,
                bias_ref,
            } => {
                let w = &model.tensors[&weight_ref];
                let per_channel = in_channels * kernel_h * kernel_w;
                let mut wd = w.data().to_vec();
                for o in 0..out_channels {
                    for q in 0..per_channel {
                        wd[o * per_channel + q] *= scale.at(o);
                    }
                }
                let new_w = Tensor::new(w.shape().to_vec(), wd).unwrap();
                let mut bd = vec![0.0; out_channels];
                if let Some(ref b) = bias_ref {
                    bd.copy_from_slice(model.tensors[b].data());
                }
                for (o, slot) in bd.iter_mut().enumerate() {
                    *slot = scale.at(o) * *slot + shift.at(o);
                }
                let bias_name = bias_ref.unwrap_or_else(|| fresh_bias_name(&model, bn_index - 1));
                model.tensors.insert(weight_ref.clone(), new_w);
                model
                    .tensors
                    .insert(bias_name.clone(), Tensor::from_vec(bd));
                model.layers[bn_index - 1] = LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    weight_ref,
                    bias_ref: Some(bias_name),
                };
            }
            other => unreachable!("validated batchnorm follows a linear layer, found {other:?}"),
        }
        model.tensors.remove(&scale_ref);
        model.tensors.remove(&shift_ref);
        model.layers.remove(bn_index);
    }
}

fn fresh_bias_name(model: &Model, layer_index: usize) -> String {
    let mut name = format!("folded_bias_{layer_index}");
    while model.tensors.contains_key(&name) {
        name.push('_');
    }
    name
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f64_bytes(values: &[f64]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn dense_manifest() -> String {
        serde_json::json!({
            "input_shape": [2],
            "layers": [
                {"kind": "dense", "in_features": 2, "out_features": 1, "weight_ref": "w"}
            ],
            "tensors": {
                "w": {"dtype": "f64", "shape": [2, 1], "offset": 0}
            }
        })
        .to_string()
    }

    #[test]
    fn loads_minimal_dense_model() {
        let blob = f64_bytes(&[1.0, 1.0]);
        let m = load_model(dense_manifest().as_bytes(), &blob).unwrap();
        assert_eq!(m.input_shape, vec![2]);
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.tensor("w").data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_chain_mismatch_reports_layer_index() {
        let manifest = serde_json::json!({
            "input_shape": [2],
            "layers": [
                {"kind": "dense", "in_features": 2, "out_features": 2, "weight_ref": "w0"},
                {"kind": "dense", "in_features": 3, "out_features": 1, "weight_ref": "w1"}
            ],
            "tensors": {
                "w0": {"dtype": "f64", "shape": [2, 2], "offset": 0},
                "w1": {"dtype": "f64", "shape": [3, 1], "offset": 4}
            }
        })
        .to_string();
        let blob = f64_bytes(&[0.0; 7]);
        let err = load_model(manifest.as_bytes(), &blob).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1"), "{msg}");
        assert!(msg.contains("[3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn unknown_layer_kind_is_a_parse_error() {
        let manifest = r#"{"input_shape":[1],"layers":[{"kind":"gelu"}],"tensors":{}}"#;
        let err = load_model(manifest.as_bytes(), &[]).unwrap_err();
        assert!(err.to_string().contains("gelu"), "{err}");
    }

    #[test]
    fn dangling_tensor_reference_is_diagnosed() {
        let manifest = r#"{
            "input_shape": [2],
            "layers": [{"kind": "dense", "in_features": 2, "out_features": 1, "weight_ref": "missing"}],
            "tensors": {}
        }"#;
        let err = load_model(manifest.as_bytes(), &[]).unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
    }

    #[test]
    fn blob_truncation_is_detected() {
        let blob = f64_bytes(&[1.0]); // needs two elements
        let err = load_model(dense_manifest().as_bytes(), &blob).unwrap_err();
        assert!(matches!(err, ModelError::BlobTruncated { .. }), "{err}");
    }

    #[test]
    fn element_count_overflow_is_detected() {
        let entry = TensorEntry {
            dtype: Dtype::F64,
            shape: vec![usize::MAX, 2],
            offset: 0,
        };
        let err = load_tensor_blob("huge", &entry, &[]).unwrap_err();
        assert!(matches!(err, ModelError::ElementCountOverflow { .. }));
    }

    #[test]
    fn f32_values_widen_exactly() {
        let entry = TensorEntry {
            dtype: Dtype::F32,
            shape: vec![1],
            offset: 0,
        };
        let blob = 0.5f32.to_le_bytes().to_vec();
        let t = load_tensor_blob("x", &entry, &blob).unwrap();
        assert_eq!(t.data(), &[0.5]);
    }

    #[test]
    fn f64_blob_decodes_at_offset() {
        let entry = TensorEntry {
            dtype: Dtype::F64,
            shape: vec![2],
            offset: 0,
        };
        let t = load_tensor_blob("x", &entry, &f64_bytes(&[1.0, 2.0])).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0]);
    }

    #[test]
    fn validate_flags_midstream_softmax() {
        let manifest = serde_json::json!({
            "input_shape": [2],
            "layers": [
                {"kind": "softmax"},
                {"kind": "relu"}
            ],
            "tensors": {}
        })
        .to_string();
        let doc: ManifestDoc = serde_json::from_str(&manifest).unwrap();
        let model = Model {
            input_shape: doc.input_shape,
            layers: doc.layers,
            tensors: BTreeMap::new(),
        };
        let diags = validate_model(&model);
        assert!(
            diags.iter().any(|d| d.message.contains("softmax must be final")),
            "{diags:?}"
        );
    }

    #[test]
    fn validate_flags_wrong_conv_weight_rank() {
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), Tensor::zeros(vec![1, 3, 3]).unwrap());
        let model = Model {
            input_shape: vec![1, 4, 4],
            layers: vec![LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: Padding::Valid,
                weight_ref: "w".into(),
                bias_ref: None,
            }],
            tensors,
        };
        let diags = validate_model(&model);
        assert!(
            diags
                .iter()
                .any(|d| d.message.contains("\"w\"") && d.message.contains("rank 4")),
            "{diags:?}"
        );
    }

    #[test]
    fn validate_flags_batchnorm_width_mismatch() {
        let mut tensors = BTreeMap::new();
        tensors.insert("w".into(), Tensor::zeros(vec![2, 3]).unwrap());
        tensors.insert("g".into(), Tensor::zeros(vec![2]).unwrap()); // should be [3]
        tensors.insert("s".into(), Tensor::zeros(vec![3]).unwrap());
        let model = Model {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense {
                    in_features: 2,
                    out_features: 3,
                    weight_ref: "w".into(),
                    bias_ref: None,
                },
                LayerSpec::Batchnorm {
                    scale_ref: "g".into(),
                    shift_ref: "s".into(),
                },
            ],
            tensors,
        };
        let diags = validate_model(&model);
        assert!(
            diags.iter().any(|d| d.message.contains("\"g\"") && d.message.contains("[3]")),
            "{diags:?}"
        );
    }

    #[test]
    fn validate_accepts_clean_mlp() {
        let mut tensors = BTreeMap::new();
        tensors.insert("w0".into(), Tensor::zeros(vec![2, 3]).unwrap());
        tensors.insert("w1".into(), Tensor::zeros(vec![3, 1]).unwrap());
        let model = Model {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense {
                    in_features: 2,
                    out_features: 3,
                    weight_ref: "w0".into(),
                    bias_ref: None,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_features: 3,
                    out_features: 1,
                    weight_ref: "w1".into(),
                    bias_ref: None,
                },
            ],
            tensors,
        };
        assert!(validate_model(&model).is_empty());
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let blob = f64_bytes(&[0.25, -1.5]);
        let m = load_model(dense_manifest().as_bytes(), &blob).unwrap();
        let (manifest2, blob2) = save_model(&m);
        assert_eq!(blob2, blob);
        let m2 = load_model(manifest2.as_bytes(), &blob2).unwrap();
        let (manifest3, blob3) = save_model(&m2);
        assert_eq!(manifest2, manifest3);
        assert_eq!(blob2, blob3);
    }

    #[test]
    fn conv_batchnorm_folds_and_preserves_forward() {
        use crate::forward::forward;
        use crate::model::builder::ModelBuilder;
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let weights: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![rng.random_range(-1.0..1.0)];
        let unfolded = ModelBuilder::new(vec![1, 4, 4])
            .conv2d_from(1, 3, 3, 1, Padding::Valid, weights.clone(), Some(bias.clone()))
            .batchnorm(vec![2.0], vec![1.0])
            .build()
            .unwrap();
        let (manifest, blob) = save_model(&unfolded);
        let folded = load_model(manifest.as_bytes(), &blob).unwrap();
        assert_eq!(folded.layers.len(), 1);
        let folded_w = folded.tensor("w0");
        for (got, want) in folded_w.data().iter().zip(&weights) {
            assert!((got - 2.0 * want).abs() < 1e-15);
        }
        assert!((folded.tensor("b0").at(0) - (2.0 * bias[0] + 1.0)).abs() < 1e-15);
        let x = Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (y_unfolded, _) = forward(&unfolded, &x).unwrap();
        let (y_folded, _) = forward(&folded, &x).unwrap();
        for (a, b) in y_unfolded.data().iter().zip(y_folded.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_folding_preserves_forward_over_random_models() {
        use crate::forward::forward;
        use crate::model::builder::ModelBuilder;
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(91);
        for trial in 0..25 {
            let dense_case = rng.random_bool(0.5);
            let (unfolded, x) = if dense_case {
                let in_dim = rng.random_range(2..5);
                let out_dim = rng.random_range(1..4);
                let weights: Vec<f64> =
                    (0..in_dim * out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let with_bias = rng.random_bool(0.5);
                let bias: Option<Vec<f64>> =
                    with_bias.then(|| (0..out_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
                let scale: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let shift: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let m = ModelBuilder::new(vec![in_dim])
                    .dense_from(vec![in_dim, out_dim], weights, bias)
                    .batchnorm(scale, shift)
                    .relu()
                    .build()
                    .unwrap();
                let x = Tensor::from_vec(
                    (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                );
                (m, x)
            } else {
                let ch = rng.random_range(1..3);
                let weights: Vec<f64> =
                    (0..ch * 2 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let scale: Vec<f64> = (0..ch).map(|_| rng.random_range(-2.0..2.0)).collect();
                let shift: Vec<f64> = (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect();
                let m = ModelBuilder::new(vec![2, 3, 3])
                    .conv2d_from(ch, 2, 2, 1, Padding::Valid, weights, None)
                    .batchnorm(scale, shift)
                    .build()
                    .unwrap();
                let x = Tensor::new(
                    vec![2, 3, 3],
                    (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                (m, x)
            };
            let (manifest, blob) = save_model(&unfolded);
            let folded = load_model(manifest.as_bytes(), &blob).unwrap();
            assert!(folded.layers.iter().all(|l| !matches!(l, LayerSpec::Batchnorm { .. })));
            let (a, _) = forward(&unfolded, &x).unwrap();
            let (b, _) = forward(&folded, &x).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() <= 1e-12, "trial {trial}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn batchnorm_folds_into_dense() {
        let manifest = serde_json::json!({
            "input_shape": [2],
            "layers": [
                {"kind": "dense", "in_features": 2, "out_features": 2, "weight_ref": "w", "bias_ref": "b"},
                {"kind": "batchnorm", "scale_ref": "g", "shift_ref": "s"}
            ],
            "tensors": {
                "w": {"dtype": "f64", "shape": [2, 2], "offset": 0},
                "b": {"dtype": "f64", "shape": [2], "offset": 4},
                "g": {"dtype": "f64", "shape": [2], "offset": 6},
                "s": {"dtype": "f64", "shape": [2], "offset": 8}
            }
        })
        .to_string();
        let blob = f64_bytes(&[
            1.0, 2.0, 3.0, 4.0, // w
            0.5, -0.5, // b
            2.0, 3.0, // scale
            1.0, -1.0, // shift
        ]);
        let m = load_model(manifest.as_bytes(), &blob).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.tensor("w").data(), &[2.0, 6.0, 6.0, 12.0]);
        assert_eq!(m.tensor("b").data(), &[2.0 * 0.5 + 1.0, 3.0 * -0.5 - 1.0]);
        assert!(!m.tensors.contains_key("g"));
    }
}
