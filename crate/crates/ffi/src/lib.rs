//! C ABI for the attribution engine.
//!
//! Handles are opaque pointers created and destroyed by this library; every
//! fallible call returns an [`nnattr_status`] and stores a human-readable
//! message retrievable through [`nnattr_last_error`] (thread-local, valid
//! until the next failing call on the same thread).
//!
//! Method configuration uses the same textual form as the CLI: a method name
//! plus a `key=value,key=value` parameter list.

#![allow(non_camel_case_types)]
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nnattr::analyzers::analyze;
use nnattr::config::{build_method_config, parse_params, parse_selector};
use nnattr::evaluation::{perturbation_curve, PerturbOrder, PerturbValue, PerturbationConfig};
use nnattr::forward::{forward, NeuronSelector};
use nnattr::heatmap::{render_heatmap, HeatmapSpec};
use nnattr::model::Model;
use nnattr::patterns::{load_patterns, save_patterns, PatternStats, Patterns};
use nnattr::tensor::Tensor;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum nnattr_status {
    NNATTR_OK = 0,
    /// A required pointer was null or a buffer length did not match.
    NNATTR_INVALID_ARGUMENT = 1,
    /// Bad method name or parameters.
    NNATTR_INVALID_CONFIG = 2,
    /// Malformed model, weight blob or pattern file.
    NNATTR_MODEL_ERROR = 3,
    /// The analysis itself failed (missing patterns, non-finite values, ...).
    NNATTR_ANALYSIS_ERROR = 4,
    /// A string argument was not valid UTF-8.
    NNATTR_INVALID_UTF8 = 5,
    /// Unexpected internal failure.
    NNATTR_INTERNAL = 6,
}

use nnattr_status::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

type FfiResult<T> = Result<T, (nnattr_status, String)>;

fn run(body: impl FnOnce() -> FfiResult<()>) -> nnattr_status {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => NNATTR_OK,
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NNATTR_INTERNAL
        }
    }
}

fn required<'a, T>(ptr: *const T, name: &str) -> FfiResult<&'a T> {
    unsafe { ptr.as_ref() }.ok_or_else(|| {
        (
            NNATTR_INVALID_ARGUMENT,
            format!("argument {name} must not be null"),
        )
    })
}

fn required_str<'a>(ptr: *const c_char, name: &str) -> FfiResult<&'a str> {
    if ptr.is_null() {
        return Err((
            NNATTR_INVALID_ARGUMENT,
            format!("argument {name} must not be null"),
        ));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| (NNATTR_INVALID_UTF8, format!("argument {name} is not UTF-8")))
}

fn optional_str<'a>(ptr: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if ptr.is_null() {
        Ok(None)
    } else {
        required_str(ptr, name).map(Some)
    }
}

unsafe fn in_slice<'a, T>(ptr: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err((
            NNATTR_INVALID_ARGUMENT,
            format!("argument {name} must not be null"),
        ));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, name: &str) -> FfiResult<&'a mut [T]> {
    if ptr.is_null() {
        return Err((
            NNATTR_INVALID_ARGUMENT,
            format!("argument {name} must not be null"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Opaque model handle.
pub struct nnattr_model {
    inner: Model,
}

/// Opaque fitted-patterns handle.
pub struct nnattr_patterns {
    inner: Patterns,
}

/// Heap buffer returned to the caller; release with `nnattr_buffer_free`.
#[repr(C)]
pub struct nnattr_buffer {
    pub data: *mut u8,
    pub len: usize,
}

impl nnattr_buffer {
    fn from_vec(v: Vec<u8>) -> Self {
        let mut boxed = v.into_boxed_slice();
        let data = boxed.as_mut_ptr();
        let len = boxed.len();
        std::mem::forget(boxed);
        Self { data, len }
    }
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn nnattr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread (empty if none).
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nnattr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Releases a buffer returned by this library. Null data is a no-op.
#[no_mangle]
pub unsafe extern "C" fn nnattr_buffer_free(buffer: nnattr_buffer) {
    if !buffer.data.is_null() {
        let slice = std::ptr::slice_from_raw_parts_mut(buffer.data, buffer.len);
        drop(Box::from_raw(slice));
    }
}

/// Parses and validates a model from a JSON manifest and weight blob.
/// On success `*out_model` owns the handle; release with `nnattr_model_free`.
#[no_mangle]
pub unsafe extern "C" fn nnattr_model_load(
    manifest: *const u8,
    manifest_len: usize,
    blob: *const u8,
    blob_len: usize,
    out_model: *mut *mut nnattr_model,
) -> nnattr_status {
    run(|| {
        let manifest = in_slice(manifest, manifest_len, "manifest")?;
        let blob = in_slice(blob, blob_len, "blob")?;
        if out_model.is_null() {
            return Err((NNATTR_INVALID_ARGUMENT, "out_model must not be null".into()));
        }
        let model = nnattr::model::load_model(manifest, blob)
            .map_err(|e| (NNATTR_MODEL_ERROR, e.to_string()))?;
        *out_model = Box::into_raw(Box::new(nnattr_model { inner: model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn nnattr_model_free(model: *mut nnattr_model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of dimensions of the model input.
#[no_mangle]
pub unsafe extern "C" fn nnattr_model_input_rank(model: *const nnattr_model) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_shape.len())
}

/// Total number of input elements.
#[no_mangle]
pub unsafe extern "C" fn nnattr_model_input_len(model: *const nnattr_model) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.inner.input_shape.iter().product())
}

/// Copies the input shape into `dims`, which must hold `rank` entries.
#[no_mangle]
pub unsafe extern "C" fn nnattr_model_input_shape(
    model: *const nnattr_model,
    dims: *mut usize,
    rank: usize,
) -> nnattr_status {
    run(|| {
        let model = required(model, "model")?;
        if rank != model.inner.input_shape.len() {
            return Err((
                NNATTR_INVALID_ARGUMENT,
                format!(
                    "rank {rank} does not match model input rank {}",
                    model.inner.input_shape.len()
                ),
            ));
        }
        let dims = out_slice(dims, rank, "dims")?;
        dims.copy_from_slice(&model.inner.input_shape);
        Ok(())
    })
}

/// Number of logits (length of the pre-softmax output).
#[no_mangle]
pub unsafe extern "C" fn nnattr_model_output_len(model: *const nnattr_model) -> usize {
    let Some(model) = model.as_ref() else {
        return 0;
    };
    let mut shape = model.inner.input_shape.clone();
    for layer in &model.inner.layers {
        if matches!(layer, nnattr::model::LayerSpec::Softmax) {
            break;
        }
        match nnattr::model::layer_output_shape(layer, &shape) {
            Ok(next) => shape = next,
            Err(_) => return 0,
        }
    }
    shape.iter().product()
}

fn input_tensor(model: &Model, input: &[f64]) -> FfiResult<Tensor> {
    let expected: usize = model.input_shape.iter().product();
    if input.len() != expected {
        return Err((
            NNATTR_INVALID_ARGUMENT,
            format!(
                "input has {} elements, model expects {expected}",
                input.len()
            ),
        ));
    }
    Tensor::new(model.input_shape.clone(), input.to_vec())
        .map_err(|e| (NNATTR_INVALID_ARGUMENT, e.to_string()))
}

/// Runs the forward pass and writes the pre-softmax logits.
#[no_mangle]
pub unsafe extern "C" fn nnattr_forward(
    model: *const nnattr_model,
    input: *const f64,
    input_len: usize,
    out_logits: *mut f64,
    logits_len: usize,
) -> nnattr_status {
    run(|| {
        let model = required(model, "model")?;
        let input = in_slice(input, input_len, "input")?;
        let x = input_tensor(&model.inner, input)?;
        let (logits, _) =
            forward(&model.inner, &x).map_err(|e| (NNATTR_ANALYSIS_ERROR, e.to_string()))?;
        if logits.len() != logits_len {
            return Err((
                NNATTR_INVALID_ARGUMENT,
                format!(
                    "logits buffer holds {logits_len}, model produces {}",
                    logits.len()
                ),
            ));
        }
        out_slice(out_logits, logits_len, "out_logits")?.copy_from_slice(logits.data());
        Ok(())
    })
}

/// Computes an attribution.
///
/// `method` is a method name (`gradient`, `lrp_epsilon`, ...); `params` is an
/// optional `key=value,key=value` list; `select` is `"max"` (default when
/// null) or a unit index. `patterns` may be null except for the pattern
/// methods. The attribution is written to `out_attribution` (same length as
/// the input) and the analyzed unit to `out_selected_unit` (may be null).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn nnattr_analyze(
    model: *const nnattr_model,
    input: *const f64,
    input_len: usize,
    method: *const c_char,
    params: *const c_char,
    select: *const c_char,
    seed: u64,
    patterns: *const nnattr_patterns,
    out_attribution: *mut f64,
    out_len: usize,
    out_selected_unit: *mut usize,
) -> nnattr_status {
    run(|| {
        let model = required(model, "model")?;
        let input = in_slice(input, input_len, "input")?;
        let method = required_str(method, "method")?;
        let params = parse_params(optional_str(params, "params")?.unwrap_or(""))
            .map_err(|e| (NNATTR_INVALID_CONFIG, e.to_string()))?;
        let selector = match optional_str(select, "select")? {
            Some(text) => {
                parse_selector(text).map_err(|e| (NNATTR_INVALID_CONFIG, e.to_string()))?
            }
            None => NeuronSelector::Max,
        };
        let cfg = build_method_config(method, &params, selector, seed, None)
            .map_err(|e| (NNATTR_INVALID_CONFIG, e.to_string()))?;
        let x = input_tensor(&model.inner, input)?;
        if out_len != input.len() {
            return Err((
                NNATTR_INVALID_ARGUMENT,
                format!(
                    "out buffer holds {out_len}, attribution needs {}",
                    input.len()
                ),
            ));
        }
        let patterns = patterns.as_ref().map(|p| &p.inner);
        let attribution = analyze(&model.inner, &x, &cfg, patterns)
            .map_err(|e| (NNATTR_ANALYSIS_ERROR, e.to_string()))?;
        out_slice(out_attribution, out_len, "out_attribution")?
            .copy_from_slice(attribution.values.data());
        if !out_selected_unit.is_null() {
            *out_selected_unit = attribution.selected_unit;
        }
        Ok(())
    })
}

/// Fits patterns from `n_samples` stacked inputs (row-major, each of
/// `sample_len` = model input length).
#[no_mangle]
pub unsafe extern "C" fn nnattr_patterns_fit(
    model: *const nnattr_model,
    samples: *const f64,
    n_samples: usize,
    sample_len: usize,
    out_patterns: *mut *mut nnattr_patterns,
) -> nnattr_status {
    run(|| {
        let model = required(model, "model")?;
        let data = in_slice(samples, n_samples.saturating_mul(sample_len), "samples")?;
        if out_patterns.is_null() {
            return Err((
                NNATTR_INVALID_ARGUMENT,
                "out_patterns must not be null".into(),
            ));
        }
        if n_samples == 0 {
            return Err((NNATTR_ANALYSIS_ERROR, "no samples".into()));
        }
        let mut batch = Vec::with_capacity(n_samples);
        for chunk in data.chunks(sample_len) {
            batch.push(input_tensor(&model.inner, chunk)?);
        }
        let mut stats = PatternStats::new(&model.inner);
        stats
            .accumulate(&model.inner, &batch)
            .map_err(|e| (NNATTR_ANALYSIS_ERROR, e.to_string()))?;
        let patterns = stats
            .finalize(&model.inner)
            .map_err(|e| (NNATTR_ANALYSIS_ERROR, e.to_string()))?;
        *out_patterns = Box::into_raw(Box::new(nnattr_patterns { inner: patterns }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn nnattr_patterns_free(patterns: *mut nnattr_patterns) {
    if !patterns.is_null() {
        drop(Box::from_raw(patterns));
    }
}

/// Serializes patterns to the manifest + blob format. Both buffers must be
/// released with `nnattr_buffer_free`.
#[no_mangle]
pub unsafe extern "C" fn nnattr_patterns_save(
    patterns: *const nnattr_patterns,
    out_manifest: *mut nnattr_buffer,
    out_blob: *mut nnattr_buffer,
) -> nnattr_status {
    run(|| {
        let patterns = required(patterns, "patterns")?;
        if out_manifest.is_null() || out_blob.is_null() {
            return Err((
                NNATTR_INVALID_ARGUMENT,
                "output buffers must not be null".into(),
            ));
        }
        let (manifest, blob) = save_patterns(&patterns.inner);
        *out_manifest = nnattr_buffer::from_vec(manifest.into_bytes());
        *out_blob = nnattr_buffer::from_vec(blob);
        Ok(())
    })
}

/// Loads a pattern file and validates it against the model.
#[no_mangle]
pub unsafe extern "C" fn nnattr_patterns_load(
    manifest: *const u8,
    manifest_len: usize,
    blob: *const u8,
    blob_len: usize,
    model: *const nnattr_model,
    out_patterns: *mut *mut nnattr_patterns,
) -> nnattr_status {
    run(|| {
        let manifest = in_slice(manifest, manifest_len, "manifest")?;
        let blob = in_slice(blob, blob_len, "blob")?;
        let model = required(model, "model")?;
        if out_patterns.is_null() {
            return Err((
                NNATTR_INVALID_ARGUMENT,
                "out_patterns must not be null".into(),
            ));
        }
        let patterns = load_patterns(manifest, blob, &model.inner)
            .map_err(|e| (NNATTR_MODEL_ERROR, e.to_string()))?;
        *out_patterns = Box::into_raw(Box::new(nnattr_patterns { inner: patterns }));
        Ok(())
    })
}

/// Runs a perturbation curve for a precomputed attribution: regions of
/// `region_h` x `region_w` are replaced by `value` in attribution order
/// (descending, or a seeded random order when `random_order` is true).
/// Writes `steps + 1` scores (scores[0] is the unperturbed logit) and the
/// AOPC.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn nnattr_perturbation_curve(
    model: *const nnattr_model,
    input: *const f64,
    input_len: usize,
    attribution: *const f64,
    attribution_len: usize,
    selected_unit: usize,
    region_h: usize,
    region_w: usize,
    steps: usize,
    value: f64,
    random_order: bool,
    seed: u64,
    out_scores: *mut f64,
    out_aopc: *mut f64,
) -> nnattr_status {
    run(|| {
        let model = required(model, "model")?;
        let input = in_slice(input, input_len, "input")?;
        let attribution = in_slice(attribution, attribution_len, "attribution")?;
        let x = input_tensor(&model.inner, input)?;
        let attr_tensor = input_tensor(&model.inner, attribution)?;
        let cfg = PerturbationConfig {
            region_h,
            region_w,
            steps,
            value: PerturbValue::Scalar(value),
            order: if random_order {
                PerturbOrder::Random { seed }
            } else {
                PerturbOrder::DescendingAttribution
            },
        };
        let attr = nnattr::analyzers::Attribution {
            values: attr_tensor,
            method: nnattr::analyzers::MethodConfig::new(
                nnattr::analyzers::Method::Gradient,
                NeuronSelector::Index(selected_unit),
            ),
            selected_unit,
        };
        let curve = perturbation_curve(&model.inner, &x, &attr, &cfg).map_err(|e| {
            use nnattr::evaluation::EvalError::*;
            match e {
                RegionTiling { .. } | StepsOutOfRange { .. } | ValueChannels { .. } => {
                    (NNATTR_INVALID_CONFIG, e.to_string())
                }
                other => (NNATTR_ANALYSIS_ERROR, other.to_string()),
            }
        })?;
        out_slice(out_scores, steps + 1, "out_scores")?.copy_from_slice(&curve.scores);
        if !out_aopc.is_null() {
            *out_aopc = curve.aopc;
        }
        Ok(())
    })
}

/// Renders values of the given shape (rank 1..3) as a binary PPM heatmap.
/// Release the buffer with `nnattr_buffer_free`.
#[no_mangle]
pub unsafe extern "C" fn nnattr_heatmap_ppm(
    values: *const f64,
    values_len: usize,
    shape: *const usize,
    rank: usize,
    out_ppm: *mut nnattr_buffer,
) -> nnattr_status {
    run(|| {
        let values = in_slice(values, values_len, "values")?;
        let shape = in_slice(shape, rank, "shape")?;
        if out_ppm.is_null() {
            return Err((NNATTR_INVALID_ARGUMENT, "out_ppm must not be null".into()));
        }
        let tensor = Tensor::new(shape.to_vec(), values.to_vec())
            .map_err(|e| (NNATTR_INVALID_ARGUMENT, e.to_string()))?;
        let ppm = render_heatmap(&tensor, &HeatmapSpec::default())
            .map_err(|e| (NNATTR_INVALID_ARGUMENT, e.to_string()))?;
        *out_ppm = nnattr_buffer::from_vec(ppm);
        Ok(())
    })
}
