//! Forward evaluation with per-layer tape recording.
//!
//! The tape is what makes backward rules mechanical: every entry stores the
//! exact input and output tensors of one layer, plus the winner indices for
//! max-pool layers so that forward and backward agree under ties.

use serde::Serialize;
use thiserror::Error;

use crate::conv::{weight_matrix, ConvGeom, PoolGeom};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("input shape {got:?} does not match model input shape {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("layer {index} ({kind}) cannot consume input of shape {input:?}: {reason}")]
    LayerShape {
        index: usize,
        kind: &'static str,
        input: Vec<usize>,
        reason: String,
    },
    #[error("selected unit {index} out of range for {len} logits")]
    UnitOutOfRange { index: usize, len: usize },
    #[error("neuron selection requires rank-1 logits, got shape {0:?}")]
    LogitsRank(Vec<usize>),
}

/// Layer-kind-specific forward byproducts needed by backward rules.
#[derive(Debug, Clone, PartialEq)]
pub enum Aux {
    None,
    /// For each flat output element of a max-pool layer, the flat index into
    /// the layer input that won the window (lowest index on ties).
    MaxPoolWinners(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct TapeEntry {
    pub layer_index: usize,
    pub input: Tensor,
    pub output: Tensor,
    pub aux: Aux,
    /// False only for the softmax entry; backward walks skip it.
    pub analyzable: bool,
}

/// Record of one forward pass: one entry per layer plus the pre-softmax
/// logits.
#[derive(Debug, Clone)]
pub struct Tape {
    pub entries: Vec<TapeEntry>,
    pub logits: Tensor,
}

impl Tape {
    /// Entries that take part in backward walks, in forward order.
    pub fn analyzable_entries(&self) -> impl DoubleEndedIterator<Item = &TapeEntry> {
        self.entries.iter().filter(|e| e.analyzable)
    }
}

/// Which output unit an analysis targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronSelector {
    /// Argmax over the logits, ties resolved to the lowest index.
    Max,
    /// An explicit logit index.
    Index(usize),
}

/// Scale of the one-hot backward seed at the selected unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedKind {
    /// Gradient-family methods seed with 1.0.
    One,
    /// Relevance-family methods seed with the logit value itself, which makes
    /// conservation (sum of attributions = logit) literal.
    LogitValue,
}

/// Evaluates the model on `x`, recording a complete tape.
pub fn forward(model: &Model, x: &Tensor) -> Result<(Tensor, Tape), ForwardError> {
    if x.shape() != model.input_shape.as_slice() {
        return Err(ForwardError::InputShape {
            expected: model.input_shape.clone(),
            got: x.shape().to_vec(),
        });
    }
    let mut entries = Vec::with_capacity(model.layers.len());
    let mut current = x.clone();
    let mut logits = current.clone();
    for (index, layer) in model.layers.iter().enumerate() {
        let (output, aux) = layer_forward(model, layer, &current).map_err(|reason| {
            ForwardError::LayerShape {
                index,
                kind: layer.kind_name(),
                input: current.shape().to_vec(),
                reason,
            }
        })?;
        let analyzable = !matches!(layer, LayerSpec::Softmax);
        if analyzable {
            logits = output.clone();
        }
        entries.push(TapeEntry {
            layer_index: index,
            input: current,
            output: output.clone(),
            aux,
            analyzable,
        });
        current = output;
    }
    Ok((logits.clone(), Tape { entries, logits }))
}

/// Evaluates a single layer. Returns the output tensor and any auxiliary
/// backward data (max-pool winners).
pub fn layer_forward(
    model: &Model,
    layer: &LayerSpec,
    x: &Tensor,
) -> Result<(Tensor, Aux), String> {
    match layer {
        LayerSpec::Dense {
            in_features,
            out_features,
            weight_ref,
            bias_ref,
        } => {
            if x.shape() != [*in_features] {
                return Err(format!("expected input shape [{in_features}]"));
            }
            let w = model.tensor(weight_ref);
            let mut y = vec![0.0; *out_features];
            for i in 0..*in_features {
                let xi = x.at(i);
                let row = &w.data()[i * out_features..(i + 1) * out_features];
                for (j, wij) in row.iter().enumerate() {
                    y[j] += xi * wij;
                }
            }
            if let Some(b) = bias_ref {
                let b = model.tensor(b);
                for (j, yj) in y.iter_mut().enumerate() {
                    *yj += b.at(j);
                }
            }
            Ok((Tensor::from_vec(y), Aux::None))
        }
        LayerSpec::Conv2d {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weight_ref,
            bias_ref,
            ..
        } => {
            let geom = ConvGeom::new(x.shape(), *out_channels, *kernel_h, *kernel_w, *stride, *padding);
            let w2 = weight_matrix(model.tensor(weight_ref), &geom);
            let bias = bias_ref.as_ref().map(|b| model.tensor(b));
            let q_len = geom.patch_len();
            let windows = geom.windows();
            let mut patch = vec![0.0; q_len];
            let mut y = vec![0.0; geom.out_ch * windows];
            for p in 0..windows {
                geom.gather_patch(x.data(), p, &mut patch);
                for o in 0..geom.out_ch {
                    let mut acc = 0.0;
                    for (q, &xq) in patch.iter().enumerate() {
                        acc += xq * w2.data()[q * geom.out_ch + o];
                    }
                    if let Some(b) = bias {
                        acc += b.at(o);
                    }
                    y[o * windows + p] = acc;
                }
            }
            Ok((
                Tensor::new(vec![geom.out_ch, geom.out_h, geom.out_w], y).expect("conv output"),
                Aux::None,
            ))
        }
        LayerSpec::Maxpool2d {
            window_h,
            window_w,
            stride,
        } => {
            let geom = PoolGeom::new(x.shape(), *window_h, *window_w, *stride);
            let mut y = vec![0.0; geom.output_len()];
            let mut winners = vec![0usize; geom.output_len()];
            for t in 0..geom.output_len() {
                let mut best_idx = usize::MAX;
                let mut best = f64::NEG_INFINITY;
                for idx in geom.window_indices(t) {
                    let v = x.at(idx);
                    // Strict > keeps the lowest flat index on ties.
                    if best_idx == usize::MAX || v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                y[t] = best;
                winners[t] = best_idx;
            }
            Ok((
                Tensor::new(vec![geom.ch, geom.out_h, geom.out_w], y).expect("pool output"),
                Aux::MaxPoolWinners(winners),
            ))
        }
        LayerSpec::Avgpool2d {
            window_h,
            window_w,
            stride,
        } => {
            let geom = PoolGeom::new(x.shape(), *window_h, *window_w, *stride);
            let count = (window_h * window_w) as f64;
            let mut y = vec![0.0; geom.output_len()];
            for (t, slot) in y.iter_mut().enumerate() {
                let mut acc = 0.0;
                for idx in geom.window_indices(t) {
                    acc += x.at(idx);
                }
                *slot = acc / count;
            }
            Ok((
                Tensor::new(vec![geom.ch, geom.out_h, geom.out_w], y).expect("pool output"),
                Aux::None,
            ))
        }
        LayerSpec::Relu => Ok((x.map(|v| v.max(0.0)), Aux::None)),
        LayerSpec::Flatten => {
            let flat = x.reshape(vec![x.len()]).expect("flatten reshape");
            Ok((flat, Aux::None))
        }
        LayerSpec::Batchnorm {
            scale_ref,
            shift_ref,
        } => {
            // Folded away at load time; kept so that unfolded models can
            // still be evaluated directly (used by the folding tests).
            let scale = model.tensor(scale_ref);
            let shift = model.tensor(shift_ref);
            let channels = scale.len();
            let per_channel = x.len() / channels;
            let mut y = x.data().to_vec();
            for (flat, v) in y.iter_mut().enumerate() {
                let c = flat / per_channel;
                *v = scale.at(c) * *v + shift.at(c);
            }
            Ok((Tensor::new(x.shape().to_vec(), y).expect("batchnorm output"), Aux::None))
        }
        LayerSpec::Softmax => {
            let max = x.max_value();
            let exp: Vec<f64> = x.data().iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            Ok((
                Tensor::new(x.shape().to_vec(), exp.iter().map(|&e| e / total).collect())
                    .expect("softmax output"),
                Aux::None,
            ))
        }
    }
}

/// Picks the output unit to analyze and builds the one-hot backward seed.
pub fn select_neuron(
    logits: &Tensor,
    selector: NeuronSelector,
    kind: SeedKind,
) -> Result<(usize, Tensor), ForwardError> {
    if logits.rank() != 1 {
        return Err(ForwardError::LogitsRank(logits.shape().to_vec()));
    }
    let k = match selector {
        NeuronSelector::Max => logits.argmax(),
        NeuronSelector::Index(i) => {
            if i >= logits.len() {
                return Err(ForwardError::UnitOutOfRange {
                    index: i,
                    len: logits.len(),
                });
            }
            i
        }
    };
    let scale = match kind {
        SeedKind::One => 1.0,
        SeedKind::LogitValue => logits.at(k),
    };
    let mut seed = vec![0.0; logits.len()];
    seed[k] = scale;
    Ok((k, Tensor::from_vec(seed)))
}
