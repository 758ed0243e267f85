//! Model container: a directory holding `manifest.json` plus one raw
//! little-endian f32 binary per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchOp, LayerKind, LayerTensor, ModelSnapshot};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "prunesearch-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<LayerEntry>,
    arch_graph: Vec<ArchOp>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    shape: Vec<usize>,
    #[serde(flatten)]
    weights: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<TensorRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRef {
    dtype: String,
    file: String,
    /// Byte offset into `file`.
    offset: u64,
    /// Length in bytes.
    length: u64,
}

fn read_tensor(dir: &Path, name: &str, r: &TensorRef) -> Result<Vec<f32>> {
    if r.dtype != "f32" {
        return Err(Error::Manifest {
            path: dir.join(MANIFEST),
            reason: format!("tensor `{name}` has dtype `{}`; only f32 is supported", r.dtype),
        });
    }
    let path = dir.join(&r.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let start = r.offset as usize;
    let end = start.checked_add(r.length as usize).unwrap_or(usize::MAX);
    if end > bytes.len() {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: r.length as usize / 4,
            found: bytes.len().saturating_sub(start) / 4,
        });
    }
    if r.length % 4 != 0 {
        return Err(Error::Corrupt {
            path,
            reason: format!("byte length {} is not a multiple of 4", r.length),
        });
    }
    Ok(bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Load a model container; masks start all-kept.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSnapshot> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Manifest {
            path: manifest_path,
            reason: format!("unexpected format tag `{}`", manifest.format),
        });
    }
    if manifest.version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let count: usize = entry.shape.iter().product();
        let weights = read_tensor(dir, &entry.name, &entry.weights)?;
        if weights.len() != count {
            return Err(Error::ShapeMismatch {
                name: entry.name.clone(),
                expected: count,
                found: weights.len(),
            });
        }
        let bias = entry
            .bias
            .as_ref()
            .map(|b| read_tensor(dir, &format!("{}.bias", entry.name), b))
            .transpose()?;
        layers.push(LayerTensor::new(
            entry.name.clone(),
            entry.kind,
            entry.shape.clone(),
            weights,
            bias,
        )?);
    }
    ModelSnapshot::new(
        layers,
        manifest.arch_graph,
        manifest.input_shape,
        manifest.num_classes,
    )
}

fn write_tensor(dir: &Path, file: &str, values: &[f32]) -> Result<TensorRef> {
    let path = dir.join(file);
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(TensorRef {
        dtype: "f32".into(),
        file: file.to_string(),
        offset: 0,
        length: bytes.len() as u64,
    })
}

/// Write the snapshot's current weights (not masks) as a container.
pub fn save_model(model: &ModelSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for layer in model.layers() {
        let weights = write_tensor(dir, &format!("{}.weight.bin", layer.name()), layer.weights())?;
        let bias = layer
            .bias()
            .map(|b| write_tensor(dir, &format!("{}.bias.bin", layer.name()), b))
            .transpose()?;
        entries.push(LayerEntry {
            name: layer.name().to_string(),
            kind: layer.kind(),
            shape: layer.shape().to_vec(),
            weights,
            bias,
        });
    }
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_FORMAT_VERSION,
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        layers: entries,
        arch_graph: model.arch().to_vec(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
