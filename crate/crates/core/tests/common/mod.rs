#![allow(dead_code)] // each test target uses its own subset

//! Shared fixtures for the integration suites: the fixed model zoo, input
//! sampling helpers and on-disk fixture writers.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use nnattr::model::builder::ModelBuilder;
use nnattr::model::{save_model, LayerSpec, Model, Padding};
use nnattr::patterns::{PatternStats, Patterns};
use nnattr::tensor::Tensor;

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Linear zoo model: dense 6 -> 4, no hidden layers.
pub fn zoo_linear(with_bias: bool) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let weights = uniform(&mut rng, 6 * 4, 1.0);
    let bias = with_bias.then(|| uniform(&mut rng, 4, 0.3));
    ModelBuilder::new(vec![6])
        .dense_from(vec![6, 4], weights, bias)
        .build()
        .unwrap()
}

/// MLP zoo model: dense 16 -> 32, relu, dense 32 -> 10.
pub fn zoo_mlp(with_bias: bool) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    ModelBuilder::random_mlp(&mut rng, 16, &[32, 10], with_bias)
}

/// CNN zoo model on 1x8x8 inputs:
/// conv 3x3 (4 ch) -> relu -> maxpool 2x2 -> flatten -> dense 36 -> 16 ->
/// relu -> dense 16 -> 10.
pub fn zoo_cnn(with_bias: bool) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let conv_w = uniform(&mut rng, 4 * 9, 0.5);
    let conv_b = with_bias.then(|| uniform(&mut rng, 4, 0.1));
    let d1_w = uniform(&mut rng, 36 * 16, 0.3);
    let d1_b = with_bias.then(|| uniform(&mut rng, 16, 0.1));
    let d2_w = uniform(&mut rng, 16 * 10, 0.3);
    let d2_b = with_bias.then(|| uniform(&mut rng, 10, 0.1));
    ModelBuilder::new(vec![1, 8, 8])
        .conv2d_from(4, 3, 3, 1, Padding::Valid, conv_w, conv_b)
        .relu()
        .maxpool(2, 2, 2)
        .flatten()
        .dense_from(vec![36, 16], d1_w, d1_b)
        .relu()
        .dense_from(vec![16, 10], d2_w, d2_b)
        .build()
        .unwrap()
}

pub fn zoo_all(with_bias: bool) -> Vec<(&'static str, Model)> {
    vec![
        ("linear", zoo_linear(with_bias)),
        ("mlp", zoo_mlp(with_bias)),
        ("cnn", zoo_cnn(with_bias)),
    ]
}

pub fn random_input(model: &Model, rng: &mut ChaCha8Rng, low: f64, high: f64) -> Tensor {
    let len: usize = model.input_shape.iter().product();
    Tensor::new(
        model.input_shape.clone(),
        (0..len).map(|_| rng.random_range(low..high)).collect(),
    )
    .unwrap()
}

/// True when the input sits away from every kink: all pre-relu activations
/// have |v| >= margin and every max-pool window has a top-two gap >= margin.
pub fn kink_free(model: &Model, x: &Tensor, margin: f64) -> bool {
    let (_, tape) = nnattr::forward::forward(model, x).unwrap();
    for entry in &tape.entries {
        match &model.layers[entry.layer_index] {
            LayerSpec::Relu => {
                if entry.input.data().iter().any(|v| v.abs() < margin) {
                    return false;
                }
            }
            LayerSpec::Maxpool2d {
                window_h,
                window_w,
                stride,
            } => {
                let shape = entry.input.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h - window_h) / stride + 1;
                let ow = (w - window_w) / stride + 1;
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut top = f64::NEG_INFINITY;
                            let mut second = f64::NEG_INFINITY;
                            for dy in 0..*window_h {
                                for dx in 0..*window_w {
                                    let v = entry
                                        .input
                                        .at((ch * h + oy * stride + dy) * w + ox * stride + dx);
                                    if v > top {
                                        second = top;
                                        top = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                            }
                            if second.is_finite() && top - second < margin {
                                return false;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    true
}

/// Fits patterns on `n` uniform random inputs.
pub fn fit_random_patterns(model: &Model, n: usize, seed: u64) -> Patterns {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Tensor> = (0..n)
        .map(|_| random_input(model, &mut rng, -1.0, 1.0))
        .collect();
    let mut stats = PatternStats::new(model);
    stats.accumulate(model, &samples).unwrap();
    stats.finalize(model).unwrap()
}

/// Writes a model as manifest + blob files; returns their paths.
pub fn write_model_files(dir: &Path, name: &str, model: &Model) -> (PathBuf, PathBuf) {
    let (manifest, blob) = save_model(model);
    let manifest_path = dir.join(format!("{name}.json"));
    let blob_path = dir.join(format!("{name}.bin"));
    std::fs::write(&manifest_path, manifest).unwrap();
    std::fs::write(&blob_path, blob).unwrap();
    (manifest_path, blob_path)
}

/// Writes a single input as inline tensor JSON.
pub fn write_input_json(dir: &Path, name: &str, tensor: &Tensor) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, nnattr::fileio::tensor_to_json(tensor)).unwrap();
    path
}
