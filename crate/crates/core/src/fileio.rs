//! Input/output file formats for the CLI and the C API.
//!
//! Single tensors travel as inline JSON (`{"shape": [...], "data": [...]}`);
//! batches reuse the model manifest + blob format with one named tensor per
//! item. A manifest's blob lives next to it with the extension swapped to
//! `.bin`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TensorEntry;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl FileError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FileError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        FileError::Format {
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct BatchDoc {
    tensors: BTreeMap<String, TensorEntry>,
}

/// One or many input tensors read from disk.
#[derive(Debug)]
pub enum InputSet {
    Single(Tensor),
    /// Name/tensor pairs in manifest (lexicographic) order.
    Batch(Vec<(String, Tensor)>),
}

impl InputSet {
    /// Uniform view: a single input is the one-element batch named "input".
    pub fn items(&self) -> Vec<(String, &Tensor)> {
        match self {
            InputSet::Single(t) => vec![("input".to_string(), t)],
            InputSet::Batch(items) => items.iter().map(|(n, t)| (n.clone(), t)).collect(),
        }
    }

    pub fn is_batch(&self) -> bool {
        matches!(self, InputSet::Batch(_))
    }
}

/// Path of the blob belonging to a manifest: extension swapped to `.bin`.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, FileError> {
    std::fs::read(path).map_err(|e| FileError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FileError> {
    std::fs::write(path, bytes).map_err(|e| FileError::io(path, e))
}

/// Parses an inline tensor JSON document.
pub fn tensor_from_json(path: &Path, bytes: &[u8]) -> Result<Tensor, FileError> {
    let doc: TensorDoc =
        serde_json::from_slice(bytes).map_err(|e| FileError::format(path, e.to_string()))?;
    Tensor::new(doc.shape, doc.data).map_err(|e| FileError::format(path, e.to_string()))
}

/// Serializes a tensor as inline JSON.
pub fn tensor_to_json(tensor: &Tensor) -> String {
    let doc = TensorDoc {
        shape: tensor.shape().to_vec(),
        data: tensor.data().to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("tensor serialization")
}

/// Reads a single-tensor JSON file or a batch manifest (+ sibling blob).
pub fn read_input_file(path: &Path) -> Result<InputSet, FileError> {
    let bytes = read_bytes(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| FileError::format(path, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| FileError::format(path, "expected a JSON object"))?;
    if obj.contains_key("data") && obj.contains_key("shape") {
        return Ok(InputSet::Single(tensor_from_json(path, &bytes)?));
    }
    if obj.contains_key("tensors") {
        let doc: BatchDoc =
            serde_json::from_slice(&bytes).map_err(|e| FileError::format(path, e.to_string()))?;
        let blob_path = blob_path_for(path);
        let blob = read_bytes(&blob_path)?;
        let mut items = Vec::with_capacity(doc.tensors.len());
        for (name, entry) in &doc.tensors {
            let tensor = crate::model::load_tensor_blob(name, entry, &blob)
                .map_err(|e| FileError::format(path, e.to_string()))?;
            items.push((name.clone(), tensor));
        }
        return Ok(InputSet::Batch(items));
    }
    Err(FileError::format(
        path,
        "expected {\"shape\", \"data\"} or {\"tensors\"} at the top level",
    ))
}

/// Writes named tensors as a manifest + blob pair. Extra top-level JSON
/// fields (method metadata and the like) are merged into the manifest.
pub fn write_batch(
    manifest_path: &Path,
    items: &[(String, &Tensor)],
    extra: &serde_json::Map<String, serde_json::Value>,
) -> Result<(), FileError> {
    let mut entries = BTreeMap::new();
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in items {
        entries.insert(
            name.clone(),
            TensorEntry {
                dtype: crate::model::Dtype::F64,
                shape: tensor.shape().to_vec(),
                offset,
            },
        );
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.len();
    }
    let mut doc = serde_json::Map::new();
    doc.insert(
        "tensors".to_string(),
        serde_json::to_value(&entries).expect("tensor entries"),
    );
    for (k, v) in extra {
        doc.insert(k.clone(), v.clone());
    }
    let manifest = serde_json::to_string_pretty(&serde_json::Value::Object(doc))
        .expect("manifest serialization");
    write_bytes(manifest_path, manifest.as_bytes())?;
    write_bytes(&blob_path_for(manifest_path), &blob)
}
