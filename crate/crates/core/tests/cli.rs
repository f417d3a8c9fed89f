//! CLI behavior: flows, file formats and the documented exit codes
//! (0 success, 2 bad flags/config, 3 model/file errors, 4 analysis errors).

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use nnattr::tensor::Tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nnattr"))
}

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = bin();
    for a in args {
        cmd.arg(a.as_ref());
    }
    cmd.output().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    model: std::path::PathBuf,
    weights: std::path::PathBuf,
    input: std::path::PathBuf,
}

fn mlp_fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let model = zoo_mlp(true);
    let (model_path, weights_path) = write_model_files(dir.path(), "mlp", &model);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let input = write_input_json(
        dir.path(),
        "x.json",
        &random_input(&model, &mut rng, -1.0, 1.0),
    );
    Fixture {
        dir,
        model: model_path,
        weights: weights_path,
        input,
    }
}

fn write_data_batch(dir: &Path, n: usize) -> std::path::PathBuf {
    let model = zoo_mlp(true);
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let samples: Vec<Tensor> = (0..n)
        .map(|_| random_input(&model, &mut rng, -1.0, 1.0))
        .collect();
    let items: Vec<(String, &Tensor)> = samples
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("s{i:04}"), t))
        .collect();
    let path = dir.join("data.json");
    nnattr::fileio::write_batch(&path, &items, &serde_json::Map::new()).unwrap();
    path
}

#[test]
fn analyze_writes_attribution_of_input_shape() {
    let f = mlp_fixture();
    let out = f.dir.path().join("attr.json");
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"gradient", &"--out", &out,
    ]);
    assert!(output.status.success(), "{output:?}");
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(doc["shape"], serde_json::json!([16]));
    assert_eq!(doc["data"].as_array().unwrap().len(), 16);
    assert!(doc["selected_unit"].is_u64());
}

#[test]
fn analyze_rejects_bad_alphabeta_with_exit_2() {
    let f = mlp_fixture();
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"lrp_alphabeta", &"--param", &"alpha=2,beta=0.5",
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn analyze_pattern_net_without_patterns_is_exit_4() {
    let f = mlp_fixture();
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"pattern_net",
    ]);
    assert_eq!(output.status.code(), Some(4), "{output:?}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("patterns required"), "{stderr}");
}

#[test]
fn missing_model_file_is_exit_3() {
    let f = mlp_fixture();
    let output = run(&[
        &"analyze", &"--model", &f.dir.path().join("nope.json"), &"--weights", &f.weights,
        &"--input", &f.input, &"--method", &"gradient",
    ]);
    assert_eq!(output.status.code(), Some(3), "{output:?}");
}

#[test]
fn unknown_method_is_exit_2() {
    let f = mlp_fixture();
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"mystery",
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn selector_out_of_range_is_exit_4() {
    let f = mlp_fixture();
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"gradient", &"--select", &"99",
    ]);
    assert_eq!(output.status.code(), Some(4), "{output:?}");
}

#[test]
fn fit_patterns_then_pattern_attribution_end_to_end() {
    let f = mlp_fixture();
    let data = write_data_batch(f.dir.path(), 1000);
    let patterns_out = f.dir.path().join("patterns.json");
    let output = run(&[
        &"fit-patterns", &"--model", &f.model, &"--weights", &f.weights, &"--data", &data,
        &"--out", &patterns_out,
    ]);
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("layer 0:"), "{stdout}");

    // The written file loads back and satisfies the normalization identity.
    let model = zoo_mlp(true);
    let manifest = std::fs::read(&patterns_out).unwrap();
    let blob = std::fs::read(f.dir.path().join("patterns.bin")).unwrap();
    let patterns = nnattr::patterns::load_patterns(&manifest, &blob, &model).unwrap();
    for index in model.linear_layer_indices() {
        let layer = patterns.layer(index).unwrap();
        let w = match &model.layers[index] {
            nnattr::model::LayerSpec::Dense {
                weight_ref,
                in_features,
                out_features,
                ..
            } => (model.tensor(weight_ref), *in_features, *out_features),
            _ => unreachable!(),
        };
        let (w, in_dim, out_dim) = w;
        for j in 0..out_dim {
            if layer.degenerate_units.contains(&j) {
                continue;
            }
            let mut dot = 0.0;
            for i in 0..in_dim {
                dot += w.at(i * out_dim + j) * layer.a.at(i * out_dim + j);
            }
            assert!((dot - 1.0).abs() <= 1e-9, "unit {j}: {dot}");
        }
    }

    let attr_out = f.dir.path().join("attr.json");
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"pattern_attribution", &"--patterns", &patterns_out, &"--out", &attr_out,
    ]);
    assert!(output.status.success(), "{output:?}");
}

#[test]
fn fit_patterns_on_empty_data_is_exit_4() {
    let f = mlp_fixture();
    let data = f.dir.path().join("empty.json");
    std::fs::write(&data, r#"{"tensors": {}}"#).unwrap();
    std::fs::write(f.dir.path().join("empty.bin"), b"").unwrap();
    let output = run(&[
        &"fit-patterns", &"--model", &f.model, &"--weights", &f.weights, &"--data", &data,
        &"--out", &f.dir.path().join("p.json"),
    ]);
    assert_eq!(output.status.code(), Some(4), "{output:?}");
    assert!(String::from_utf8_lossy(&output.stderr).contains("no samples"));
}

#[test]
fn evaluate_ranks_attribution_above_random_order() {
    let dir = tempfile::tempdir().unwrap();
    let model = zoo_linear(true);
    let (model_path, weights_path) = write_model_files(dir.path(), "linear", &model);
    let input = write_input_json(
        dir.path(),
        "x.json",
        &Tensor::from_vec(vec![0.9, 0.5, 0.7, 0.3, 0.8, 0.6]),
    );
    let out = dir.path().join("curves.json");
    let output = run(&[
        &"evaluate", &"--model", &model_path, &"--weights", &weights_path, &"--input", &input,
        &"--method", &"input_t_gradient", &"--region", &"1", &"--steps", &"6",
        &"--order", &"desc,random", &"--seed", &"3", &"--out", &out,
    ]);
    assert!(output.status.success(), "{output:?}");
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let records = doc.as_array().unwrap();
    assert_eq!(records.len(), 2);
    let desc_aopc = records[0]["aopc"].as_f64().unwrap();
    let random_aopc = records[1]["aopc"].as_f64().unwrap();
    assert!(desc_aopc > random_aopc, "{desc_aopc} vs {random_aopc}");
    assert_eq!(records[0]["scores"].as_array().unwrap().len(), 7);

    // Summary table shows one row per (method, order).
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("desc") && stdout.contains("random"), "{stdout}");
}

#[test]
fn evaluate_with_too_many_steps_is_exit_2() {
    let f = mlp_fixture();
    let output = run(&[
        &"evaluate", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"gradient", &"--region", &"1", &"--steps", &"17",
        &"--out", &f.dir.path().join("c.json"),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn evaluate_accepts_precomputed_attribution_files() {
    let f = mlp_fixture();
    let attr_out = f.dir.path().join("attr.json");
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"lrp_epsilon", &"--out", &attr_out,
    ]);
    assert!(output.status.success(), "{output:?}");
    let out = f.dir.path().join("curve.json");
    let output = run(&[
        &"evaluate", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--attribution", &attr_out, &"--region", &"1", &"--steps", &"4", &"--out", &out,
    ]);
    assert!(output.status.success(), "{output:?}");
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    // A single curve is written as one record, per the export format.
    assert!(doc.is_object(), "{doc}");
    assert_eq!(doc["scores"].as_array().unwrap().len(), 5);
    assert!(doc["aopc"].is_f64());
    assert!(doc.get("config").is_some());
    assert!(doc.get("method").is_some());
}

#[test]
fn analyze_batch_writes_manifest_and_blob() {
    let f = mlp_fixture();
    let data = write_data_batch(f.dir.path(), 3);
    let out = f.dir.path().join("attrs.json");
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &data,
        &"--method", &"gradient", &"--out", &out,
    ]);
    assert!(output.status.success(), "{output:?}");
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let tensors = doc["tensors"].as_object().unwrap();
    assert_eq!(tensors.len(), 3);
    assert!(f.dir.path().join("attrs.bin").exists());
    assert!(doc["selected_units"].is_object());

    // Batch output reads back with the same loader the engine uses.
    match nnattr::fileio::read_input_file(&out).unwrap() {
        nnattr::fileio::InputSet::Batch(items) => {
            assert_eq!(items.len(), 3);
            for (_, t) in items {
                assert_eq!(t.shape(), &[16]);
            }
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn analyze_batch_without_out_is_exit_2() {
    let f = mlp_fixture();
    let data = write_data_batch(f.dir.path(), 2);
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &data,
        &"--method", &"gradient",
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn heatmap_of_cnn_attribution_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let model = zoo_cnn(true);
    let (model_path, weights_path) = write_model_files(dir.path(), "cnn", &model);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = write_input_json(dir.path(), "x.json", &random_input(&model, &mut rng, 0.0, 1.0));
    let ppm = dir.path().join("h.ppm");
    let output = run(&[
        &"analyze", &"--model", &model_path, &"--weights", &weights_path, &"--input", &input,
        &"--method", &"lrp_epsilon", &"--heatmap", &ppm, &"--out", &dir.path().join("a.json"),
    ]);
    assert!(output.status.success(), "{output:?}");
    let bytes = std::fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n8 8\n255\n"), "bad PPM header");
    assert_eq!(bytes.len(), 11 + 3 * 64);
}

#[test]
fn integrated_gradients_accepts_a_baseline_file() {
    let f = mlp_fixture();
    let baseline = write_input_json(
        f.dir.path(),
        "baseline.json",
        &Tensor::from_vec(vec![0.1; 16]),
    );
    let out = f.dir.path().join("attr.json");
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"integrated_gradients",
        &"--param", &format!("steps=16,baseline={}", baseline.display()),
        &"--out", &out,
    ]);
    assert!(output.status.success(), "{output:?}");
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    // The configured baseline travels with the output metadata.
    assert_eq!(doc["method"]["baseline"]["data"][0], serde_json::json!(0.1));
}

#[test]
fn smoothgrad_of_lrp_epsilon_composes_via_params() {
    let f = mlp_fixture();
    let out = f.dir.path().join("attr.json");
    let output = run(&[
        &"analyze", &"--model", &f.model, &"--weights", &f.weights, &"--input", &f.input,
        &"--method", &"smoothgrad", &"--param", &"inner=lrp_epsilon,epsilon=0.01,n=4,sigma=0.1",
        &"--seed", &"2", &"--out", &out,
    ]);
    assert!(output.status.success(), "{output:?}");
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(doc["method"]["name"], "smoothgrad");
    assert_eq!(doc["method"]["inner"]["name"], "lrp_epsilon");
}
