//! Textual method configuration shared by the CLI and the C API.
//!
//! Methods are addressed by name plus a flat `key=value` parameter list
//! (`--param epsilon=1e-4,steps=128`). SmoothGrad consumes its own keys and
//! forwards the rest to the inner method.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::analyzers::{
    Method, MethodConfig, DEFAULT_EPSILON, DEFAULT_IG_STEPS, DEFAULT_SMOOTHGRAD_SAMPLES,
};
use crate::forward::NeuronSelector;
use crate::tensor::Tensor;

pub const METHOD_NAMES: &[&str] = &[
    "gradient",
    "smoothgrad",
    "integrated_gradients",
    "deconvnet",
    "guided_backprop",
    "input_t_gradient",
    "pattern_net",
    "pattern_attribution",
    "deep_taylor",
    "lrp_z",
    "lrp_epsilon",
    "lrp_alphabeta",
];

pub const DEFAULT_DEEP_TAYLOR_LOW: f64 = 0.0;
pub const DEFAULT_DEEP_TAYLOR_HIGH: f64 = 1.0;
/// SmoothGrad noise default: 15% of the input value range.
pub const DEFAULT_SMOOTHGRAD_SIGMA: f64 = 0.15;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown method {0:?} (known: gradient, smoothgrad, integrated_gradients, deconvnet, guided_backprop, input_t_gradient, pattern_net, pattern_attribution, deep_taylor, lrp_z, lrp_epsilon, lrp_alphabeta)")]
    UnknownMethod(String),
    #[error("malformed parameter {0:?}: expected key=value")]
    MalformedParam(String),
    #[error("unknown parameter {key:?} for method {method}")]
    UnknownParam { method: String, key: String },
    #[error("parameter {key}={value} is not a valid {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("method {method} requires parameter {key}")]
    MissingParam { method: &'static str, key: &'static str },
    #[error("invalid selector {0:?}: expected \"max\" or a unit index")]
    BadSelector(String),
    #[error(transparent)]
    Invalid(#[from] crate::analyzers::AnalyzeError),
}

/// Parses a `k=v,k=v` list.
pub fn parse_params(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for piece in text.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let (key, value) = piece
            .split_once('=')
            .ok_or_else(|| ConfigError::MalformedParam(piece.to_string()))?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Parses `max` or an explicit unit index.
pub fn parse_selector(text: &str) -> Result<NeuronSelector, ConfigError> {
    if text.eq_ignore_ascii_case("max") {
        return Ok(NeuronSelector::Max);
    }
    text.parse::<usize>()
        .map(NeuronSelector::Index)
        .map_err(|_| ConfigError::BadSelector(text.to_string()))
}

fn get_f64(params: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>, ConfigError> {
    params
        .get(key)
        .map(|v| {
            v.parse::<f64>().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected: "number",
            })
        })
        .transpose()
}

fn get_usize(params: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>, ConfigError> {
    params
        .get(key)
        .map(|v| {
            v.parse::<usize>().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected: "non-negative integer",
            })
        })
        .transpose()
}

fn get_bool(params: &BTreeMap<String, String>, key: &str) -> Result<Option<bool>, ConfigError> {
    params
        .get(key)
        .map(|v| {
            v.parse::<bool>().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected: "true or false",
            })
        })
        .transpose()
}

fn allowed_keys(method: &str) -> &'static [&'static str] {
    match method {
        "lrp_epsilon" => &["epsilon"],
        "lrp_alphabeta" => &["alpha", "beta"],
        "deep_taylor" => &["low", "high"],
        "integrated_gradients" => &["steps", "baseline"],
        "smoothgrad" => &["sigma", "n", "inner", "relative_sigma", "seed"],
        _ => &[],
    }
}

fn check_keys(
    method: &str,
    params: &BTreeMap<String, String>,
    inner: Option<&str>,
) -> Result<(), ConfigError> {
    let own = allowed_keys(method);
    let forwarded = inner.map(allowed_keys).unwrap_or(&[]);
    for key in params.keys() {
        if !own.contains(&key.as_str()) && !forwarded.contains(&key.as_str()) {
            return Err(ConfigError::UnknownParam {
                method: method.to_string(),
                key: key.clone(),
            });
        }
    }
    Ok(())
}

/// Builds a validated [`MethodConfig`] from a method name and parameters.
///
/// `seed` feeds stochastic components (smoothgrad noise); `baseline` is the
/// IntegratedGradients baseline tensor when the caller resolved one (zero
/// tensor otherwise).
pub fn build_method_config(
    name: &str,
    params: &BTreeMap<String, String>,
    selector: NeuronSelector,
    seed: u64,
    baseline: Option<Tensor>,
) -> Result<MethodConfig, ConfigError> {
    let method = match name {
        "gradient" => Method::Gradient,
        "deconvnet" => Method::Deconvnet,
        "guided_backprop" => Method::GuidedBackprop,
        "input_t_gradient" => Method::InputTGradient,
        "lrp_z" => Method::LrpZ,
        "pattern_net" => Method::PatternNet,
        "pattern_attribution" => Method::PatternAttribution,
        "lrp_epsilon" => Method::LrpEpsilon {
            epsilon: get_f64(params, "epsilon")?.unwrap_or(DEFAULT_EPSILON),
        },
        "lrp_alphabeta" => Method::LrpAlphaBeta {
            alpha: get_f64(params, "alpha")?.ok_or(ConfigError::MissingParam {
                method: "lrp_alphabeta",
                key: "alpha",
            })?,
            beta: get_f64(params, "beta")?.ok_or(ConfigError::MissingParam {
                method: "lrp_alphabeta",
                key: "beta",
            })?,
        },
        "deep_taylor" => Method::DeepTaylor {
            low: get_f64(params, "low")?.unwrap_or(DEFAULT_DEEP_TAYLOR_LOW),
            high: get_f64(params, "high")?.unwrap_or(DEFAULT_DEEP_TAYLOR_HIGH),
        },
        "integrated_gradients" => Method::IntegratedGradients {
            baseline,
            steps: get_usize(params, "steps")?.unwrap_or(DEFAULT_IG_STEPS),
        },
        "smoothgrad" => {
            let inner_name = params.get("inner").cloned();
            let inner_name = inner_name.as_deref().unwrap_or("gradient");
            if inner_name == "smoothgrad" {
                return Err(ConfigError::Invalid(
                    crate::analyzers::AnalyzeError::InvalidConfig(
                        "smoothgrad cannot wrap itself".into(),
                    ),
                ));
            }
            check_keys("smoothgrad", params, Some(inner_name))?;
            let mut inner_params = params.clone();
            for key in allowed_keys("smoothgrad") {
                inner_params.remove(*key);
            }
            let inner = build_method_config(inner_name, &inner_params, selector, seed, baseline)?;
            let cfg = MethodConfig::new(
                Method::SmoothGrad {
                    inner: Box::new(inner),
                    sigma: get_f64(params, "sigma")?.unwrap_or(DEFAULT_SMOOTHGRAD_SIGMA),
                    samples: get_usize(params, "n")?.unwrap_or(DEFAULT_SMOOTHGRAD_SAMPLES),
                    seed: params
                        .get("seed")
                        .map(|v| {
                            v.parse::<u64>().map_err(|_| ConfigError::BadValue {
                                key: "seed".into(),
                                value: v.clone(),
                                expected: "unsigned integer",
                            })
                        })
                        .transpose()?
                        .unwrap_or(seed),
                    relative_sigma: get_bool(params, "relative_sigma")?.unwrap_or(true),
                },
                selector,
            );
            cfg.validate()?;
            return Ok(cfg);
        }
        other => return Err(ConfigError::UnknownMethod(other.to_string())),
    };
    check_keys(name, params, None)?;
    let cfg = MethodConfig::new(method, selector);
    cfg.validate()?;
    Ok(cfg)
}
