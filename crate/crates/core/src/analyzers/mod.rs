//! The method catalog and its dispatcher.
//!
//! [`analyze`] runs a forward pass, selects an output unit, seeds a backward
//! quantity at that unit and folds per-layer rules over the reversed tape.
//! Composite methods reuse the same machinery: input-times-gradient rescales
//! the plain gradient, IntegratedGradients averages gradients along a path,
//! and SmoothGrad averages any inner analysis over noisy input copies.

pub mod rules;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::conv::{ConvGeom, PoolGeom};
use crate::forward::{forward, select_neuron, NeuronSelector, SeedKind, Tape, TapeEntry};
use crate::model::{LayerSpec, Model};
use crate::patterns::Patterns;
use crate::tensor::Tensor;
use rules::{
    avgpool_backward, conv_backward, dense_backward, maxpool_backward, LinearBack, LrpVariant,
    PatternMode, PoolBack, ReluRule, RuleSet,
};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_IG_STEPS: usize = 64;
pub const DEFAULT_SMOOTHGRAD_SAMPLES: usize = 16;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("invalid method configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Forward(#[from] crate::forward::ForwardError),
    #[error("patterns required for {0} (run fit first)")]
    PatternsRequired(&'static str),
    #[error(transparent)]
    Pattern(#[from] crate::patterns::PatternError),
    #[error("baseline shape {got:?} does not match input shape {expected:?}")]
    BaselineShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("layer {index} ({kind}) has no backward rule; fold it at load time")]
    UnsupportedLayer { index: usize, kind: &'static str },
    #[error("{method} produced non-finite attribution values")]
    NonFinite { method: String },
    #[error("{0} is a composite method and has no single backward trace")]
    TraceUnsupported(&'static str),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Analysis method plus its parameters.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    Gradient,
    Deconvnet,
    GuidedBackprop,
    InputTGradient,
    LrpZ,
    LrpEpsilon {
        epsilon: f64,
    },
    #[serde(rename = "lrp_alphabeta")]
    LrpAlphaBeta {
        alpha: f64,
        beta: f64,
    },
    DeepTaylor {
        low: f64,
        high: f64,
    },
    IntegratedGradients {
        /// Zero tensor when absent (the common convention; recorded in the
        /// output metadata via this field).
        baseline: Option<Tensor>,
        steps: usize,
    },
    #[serde(rename = "smoothgrad")]
    SmoothGrad {
        inner: Box<MethodConfig>,
        sigma: f64,
        samples: usize,
        seed: u64,
        /// Interpret sigma as a fraction of max(x) - min(x).
        relative_sigma: bool,
    },
    PatternNet,
    PatternAttribution,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::Deconvnet => "deconvnet",
            Method::GuidedBackprop => "guided_backprop",
            Method::InputTGradient => "input_t_gradient",
            Method::LrpZ => "lrp_z",
            Method::LrpEpsilon { .. } => "lrp_epsilon",
            Method::LrpAlphaBeta { .. } => "lrp_alphabeta",
            Method::DeepTaylor { .. } => "deep_taylor",
            Method::IntegratedGradients { .. } => "integrated_gradients",
            Method::SmoothGrad { .. } => "smoothgrad",
            Method::PatternNet => "pattern_net",
            Method::PatternAttribution => "pattern_attribution",
        }
    }

    fn needs_patterns(&self) -> bool {
        matches!(self, Method::PatternNet | Method::PatternAttribution)
    }

    /// Relevance-family methods seed with the logit value; gradient-family
    /// methods seed with 1.0.
    fn seed_kind(&self) -> SeedKind {
        match self {
            Method::LrpZ
            | Method::LrpEpsilon { .. }
            | Method::LrpAlphaBeta { .. }
            | Method::DeepTaylor { .. }
            | Method::PatternAttribution => SeedKind::LogitValue,
            _ => SeedKind::One,
        }
    }
}

/// A method bound to an output-unit selector.
#[derive(Debug, Clone, Serialize)]
pub struct MethodConfig {
    #[serde(flatten)]
    pub method: Method,
    pub selector: NeuronSelector,
}

impl MethodConfig {
    pub fn new(method: Method, selector: NeuronSelector) -> Self {
        Self { method, selector }
    }

    pub fn validate(&self) -> Result<(), AnalyzeError> {
        match &self.method {
            Method::LrpEpsilon { epsilon } => {
                if !epsilon.is_finite() || *epsilon <= 0.0 {
                    return Err(AnalyzeError::InvalidConfig(format!(
                        "lrp_epsilon requires epsilon > 0, got {epsilon}"
                    )));
                }
            }
            Method::LrpAlphaBeta { alpha, beta } => {
                if (alpha - beta - 1.0).abs() > 1e-12 || *alpha < 1.0 {
                    return Err(AnalyzeError::InvalidConfig(format!(
                        "lrp_alphabeta requires alpha - beta = 1 and alpha >= 1, got alpha={alpha}, beta={beta}"
                    )));
                }
            }
            Method::DeepTaylor { low, high } => {
                if *low >= *high || !low.is_finite() || !high.is_finite() {
                    return Err(AnalyzeError::InvalidConfig(format!(
                        "deep_taylor requires low < high, got [{low}, {high}]"
                    )));
                }
            }
            Method::IntegratedGradients { steps, .. } => {
                if *steps < 1 {
                    return Err(AnalyzeError::InvalidConfig(
                        "integrated_gradients requires steps >= 1".into(),
                    ));
                }
            }
            Method::SmoothGrad {
                inner,
                sigma,
                samples,
                ..
            } => {
                if *sigma < 0.0 || !sigma.is_finite() {
                    return Err(AnalyzeError::InvalidConfig(format!(
                        "smoothgrad requires sigma >= 0, got {sigma}"
                    )));
                }
                if *samples < 1 {
                    return Err(AnalyzeError::InvalidConfig(
                        "smoothgrad requires n >= 1".into(),
                    ));
                }
                if matches!(inner.method, Method::SmoothGrad { .. }) {
                    return Err(AnalyzeError::InvalidConfig(
                        "smoothgrad cannot wrap itself".into(),
                    ));
                }
                inner.validate()?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Result of one analysis: per-input-element scores for the selected unit.
#[derive(Debug, Clone, Serialize)]
pub struct Attribution {
    pub values: Tensor,
    pub method: MethodConfig,
    pub selected_unit: usize,
}

/// Relevance entering and leaving one layer during a backward walk.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub layer_index: usize,
    /// Upstream quantity at the layer output (before applying its rule).
    pub relevance_out: Tensor,
    /// Result at the layer input (after applying its rule).
    pub relevance_in: Tensor,
}

/// Computes the attribution of the selected output unit onto the input.
pub fn analyze(
    model: &Model,
    x: &Tensor,
    cfg: &MethodConfig,
    patterns: Option<&Patterns>,
) -> Result<Attribution, AnalyzeError> {
    cfg.validate()?;
    match &cfg.method {
        Method::InputTGradient => {
            let (g, unit) = single_walk(model, x, &Method::Gradient, cfg.selector, patterns)?;
            finish(g.mul(x)?, cfg, unit)
        }
        Method::IntegratedGradients { baseline, steps } => {
            integrated_gradients(model, x, baseline.as_ref(), *steps, cfg)
        }
        Method::SmoothGrad {
            inner,
            sigma,
            samples,
            seed,
            relative_sigma,
        } => smooth_aggregate(
            model,
            x,
            inner,
            *sigma,
            *samples,
            *seed,
            *relative_sigma,
            cfg,
            patterns,
        ),
        method => {
            let (values, unit) = single_walk(model, x, method, cfg.selector, patterns)?;
            finish(values, cfg, unit)
        }
    }
}

/// Like [`analyze`] but also returns the relevance entering and leaving every
/// analyzable layer, for conservation checks. Only defined for methods that
/// perform a single backward walk.
pub fn analyze_traced(
    model: &Model,
    x: &Tensor,
    cfg: &MethodConfig,
    patterns: Option<&Patterns>,
) -> Result<(Attribution, Vec<TraceStep>), AnalyzeError> {
    cfg.validate()?;
    match &cfg.method {
        Method::InputTGradient | Method::IntegratedGradients { .. } | Method::SmoothGrad { .. } => {
            Err(AnalyzeError::TraceUnsupported(cfg.method.name()))
        }
        method => {
            let (values, unit, trace) =
                single_walk_traced(model, x, method, cfg.selector, patterns)?;
            let attribution = Attribution {
                values: check_finite(values, method.name())?,
                method: cfg.clone(),
                selected_unit: unit,
            };
            Ok((attribution, trace))
        }
    }
}

fn finish(values: Tensor, cfg: &MethodConfig, unit: usize) -> Result<Attribution, AnalyzeError> {
    Ok(Attribution {
        values: check_finite(values, cfg.method.name())?,
        method: cfg.clone(),
        selected_unit: unit,
    })
}

fn check_finite(values: Tensor, method: &str) -> Result<Tensor, AnalyzeError> {
    if values.all_finite() {
        Ok(values)
    } else {
        Err(AnalyzeError::NonFinite {
            method: method.to_string(),
        })
    }
}

fn rule_set(method: &Method, model: &Model) -> RuleSet {
    let first_linear = model.linear_layer_indices().first().copied();
    match method {
        Method::Gradient | Method::InputTGradient | Method::IntegratedGradients { .. } => RuleSet {
            linear: LinearBack::Gradient,
            relu: Some(ReluRule::Gradient),
            pool: PoolBack::Gradient,
            first_linear,
        },
        Method::Deconvnet => RuleSet {
            linear: LinearBack::Gradient,
            relu: Some(ReluRule::Deconvnet),
            pool: PoolBack::Gradient,
            first_linear,
        },
        Method::GuidedBackprop => RuleSet {
            linear: LinearBack::Gradient,
            relu: Some(ReluRule::Guided),
            pool: PoolBack::Gradient,
            first_linear,
        },
        Method::PatternNet => RuleSet {
            linear: LinearBack::Pattern(PatternMode::Net),
            relu: Some(ReluRule::Gradient),
            pool: PoolBack::Gradient,
            first_linear,
        },
        Method::PatternAttribution => RuleSet {
            linear: LinearBack::Pattern(PatternMode::Attribution),
            relu: Some(ReluRule::Gradient),
            pool: PoolBack::Gradient,
            first_linear,
        },
        Method::LrpZ => RuleSet {
            linear: LinearBack::Lrp(LrpVariant::Z),
            relu: None,
            pool: PoolBack::Relevance,
            first_linear,
        },
        Method::LrpEpsilon { epsilon } => RuleSet {
            linear: LinearBack::Lrp(LrpVariant::Epsilon(*epsilon)),
            relu: None,
            pool: PoolBack::Relevance,
            first_linear,
        },
        Method::LrpAlphaBeta { alpha, beta } => RuleSet {
            linear: LinearBack::Lrp(LrpVariant::AlphaBeta {
                alpha: *alpha,
                beta: *beta,
            }),
            relu: None,
            pool: PoolBack::Relevance,
            first_linear,
        },
        Method::DeepTaylor { low, high } => RuleSet {
            linear: LinearBack::DeepTaylor {
                low: *low,
                high: *high,
            },
            relu: None,
            pool: PoolBack::Relevance,
            first_linear,
        },
        Method::SmoothGrad { .. } => unreachable!("smoothgrad delegates to its inner method"),
    }
}

fn check_patterns(
    method: &Method,
    model: &Model,
    patterns: Option<&Patterns>,
) -> Result<(), AnalyzeError> {
    if !method.needs_patterns() {
        return Ok(());
    }
    let Some(patterns) = patterns else {
        return Err(AnalyzeError::PatternsRequired(method.name()));
    };
    patterns.validate_for(model)?;
    Ok(())
}

fn single_walk(
    model: &Model,
    x: &Tensor,
    method: &Method,
    selector: NeuronSelector,
    patterns: Option<&Patterns>,
) -> Result<(Tensor, usize), AnalyzeError> {
    let (values, unit, _) = single_walk_traced(model, x, method, selector, patterns)?;
    Ok((values, unit))
}

fn single_walk_traced(
    model: &Model,
    x: &Tensor,
    method: &Method,
    selector: NeuronSelector,
    patterns: Option<&Patterns>,
) -> Result<(Tensor, usize, Vec<TraceStep>), AnalyzeError> {
    check_patterns(method, model, patterns)?;
    let (logits, tape) = forward(model, x)?;
    let (unit, seed) = select_neuron(&logits, selector, method.seed_kind())?;
    let rules = rule_set(method, model);
    let (values, trace) = walk_backward(model, &tape, seed, &rules, patterns)?;
    Ok((values, unit, trace))
}

/// Folds the per-layer backward rules over the reversed tape.
fn walk_backward(
    model: &Model,
    tape: &Tape,
    seed: Tensor,
    rules: &RuleSet,
    patterns: Option<&Patterns>,
) -> Result<(Tensor, Vec<TraceStep>), AnalyzeError> {
    let mut relevance = seed;
    let mut trace = Vec::new();
    for entry in tape.analyzable_entries().rev() {
        let relevance_out = relevance.clone();
        relevance = layer_backward(model, entry, rules, patterns, &relevance)?;
        trace.push(TraceStep {
            layer_index: entry.layer_index,
            relevance_out,
            relevance_in: relevance.clone(),
        });
    }
    Ok((relevance, trace))
}

fn layer_backward(
    model: &Model,
    entry: &TapeEntry,
    rules: &RuleSet,
    patterns: Option<&Patterns>,
    upstream: &Tensor,
) -> Result<Tensor, AnalyzeError> {
    let layer = &model.layers[entry.layer_index];
    let pattern = patterns.and_then(|p| p.layer(entry.layer_index)).map(|l| &l.a);
    Ok(match layer {
        LayerSpec::Dense {
            weight_ref,
            bias_ref,
            ..
        } => {
            let w = model.tensor(weight_ref);
            let b = bias_ref.as_ref().map(|b| model.tensor(b));
            dense_backward(rules, entry, w, b, pattern, upstream)
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
            let geom = ConvGeom::new(
                entry.input.shape(),
                *out_channels,
                *kernel_h,
                *kernel_w,
                *stride,
                *padding,
            );
            let w = model.tensor(weight_ref);
            let b = bias_ref.as_ref().map(|b| model.tensor(b));
            conv_backward(rules, entry, &geom, w, b, pattern, upstream)
        }
        LayerSpec::Relu => match rules.relu {
            Some(rule) => rules::relu_backward(rule, upstream, &entry.input),
            None => upstream.clone(), // relevance passes through unchanged
        },
        LayerSpec::Maxpool2d { .. } => maxpool_backward(entry, upstream),
        LayerSpec::Avgpool2d {
            window_h,
            window_w,
            stride,
        } => {
            let geom = PoolGeom::new(entry.input.shape(), *window_h, *window_w, *stride);
            avgpool_backward(rules.pool, &geom, entry, upstream)
        }
        LayerSpec::Flatten => upstream.reshape(entry.input.shape().to_vec())?,
        LayerSpec::Batchnorm { .. } => {
            return Err(AnalyzeError::UnsupportedLayer {
                index: entry.layer_index,
                kind: "batchnorm",
            })
        }
        LayerSpec::Softmax => unreachable!("softmax entries are not analyzable"),
    })
}

/// Midpoint-rule IntegratedGradients: `(x - baseline)` times the mean
/// gradient at `baseline + (t - 0.5)/steps * (x - baseline)`, t = 1..steps.
fn integrated_gradients(
    model: &Model,
    x: &Tensor,
    baseline: Option<&Tensor>,
    steps: usize,
    cfg: &MethodConfig,
) -> Result<Attribution, AnalyzeError> {
    let zero;
    let baseline = match baseline {
        Some(b) => {
            if b.shape() != x.shape() {
                return Err(AnalyzeError::BaselineShape {
                    expected: x.shape().to_vec(),
                    got: b.shape().to_vec(),
                });
            }
            b
        }
        None => {
            zero = Tensor::zeros(x.shape().to_vec())?;
            &zero
        }
    };
    // The selected unit is fixed at the actual input and reused along the
    // whole path; completeness is stated for a single output unit.
    let (logits, _) = forward(model, x)?;
    let (unit, _) = select_neuron(&logits, cfg.selector, SeedKind::One)?;
    let diff = x.sub(baseline)?;
    let mut acc = Tensor::zeros(x.shape().to_vec())?;
    for t in 1..=steps {
        let alpha = (t as f64 - 0.5) / steps as f64;
        let xt = baseline.add(&diff.scale(alpha))?;
        let (g, _) = single_walk(model, &xt, &Method::Gradient, NeuronSelector::Index(unit), None)?;
        acc = acc.add(&g)?;
    }
    let values = diff.mul(&acc.scale(1.0 / steps as f64))?;
    finish(values, cfg, unit)
}

/// Deterministic Gaussian input samples for SmoothGrad: sample i uses the
/// next `x.len()` standard normals from a ChaCha8 stream seeded with `seed`.
pub fn smoothgrad_samples(x: &Tensor, sigma_abs: f64, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = x
                .data()
                .iter()
                .map(|&v| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    v + sigma_abs * g
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("noisy sample shape")
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn smooth_aggregate(
    model: &Model,
    x: &Tensor,
    inner: &MethodConfig,
    sigma: f64,
    samples: usize,
    seed: u64,
    relative_sigma: bool,
    cfg: &MethodConfig,
    patterns: Option<&Patterns>,
) -> Result<Attribution, AnalyzeError> {
    let sigma_abs = if relative_sigma {
        sigma * (x.max_value() - x.min_value())
    } else {
        sigma
    };
    // Unit metadata comes from the clean input regardless of the noise.
    let (logits, _) = forward(model, x)?;
    let (unit, _) = select_neuron(&logits, inner.selector, inner.method.seed_kind())?;
    if sigma_abs == 0.0 {
        // Exactly the inner analysis; no averaging artifacts.
        let result = analyze(model, x, inner, patterns)?;
        return finish(result.values, cfg, unit);
    }
    let mut acc = Tensor::zeros(x.shape().to_vec())?;
    for noisy in smoothgrad_samples(x, sigma_abs, samples, seed) {
        let result = analyze(model, &noisy, inner, patterns)?;
        acc = acc.add(&result.values)?;
    }
    let values = acc.scale(1.0 / samples as f64);
    finish(values, cfg, unit)
}
