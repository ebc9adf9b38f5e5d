//! `<name>.manifest.json` plus `<name>.blob` (little-endian f32).
//!
//! Manifests are written from a `serde_json::Value`, whose maps are sorted,
//! so identical models give identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::conditioner::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::WaveFlowModel;
use crate::tensor::{Scalar, Tensor};

use super::config::ModelConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", base.display()))
}

pub fn blob_path(base: &Path) -> PathBuf {
    PathBuf::from(format!("{}.blob", base.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_bundle(base: &Path, mut header: BTreeMap<String, Value>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut blob = Vec::with_capacity(tensors.iter().map(|(_, t)| 4 * t.numel()).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            numel: t.numel(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.insert("format_version".into(), json!(FORMAT_VERSION));
    header.insert("tensors".into(), serde_json::to_value(&entries)?);
    let mut text = serde_json::to_string_pretty(&Value::Object(header.into_iter().collect()))?;
    text.push('\n');
    write_atomic(&blob_path(base), &blob)?;
    write_atomic(&manifest_path(base), text.as_bytes())?;
    Ok(())
}

struct Bundle {
    manifest: Value,
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

fn read_bundle(base: &Path) -> Result<Bundle> {
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(manifest_path(base))?)?;
    let version = manifest.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let entries: Vec<TensorEntry> = serde_json::from_value(manifest.get("tensors").cloned().unwrap_or(Value::Null))?;
    let blob = std::fs::read(blob_path(base))?;
    Ok(Bundle { manifest, entries, blob })
}

impl Bundle {
    fn tensor(&self, name: &str, expected: &[usize]) -> Result<Tensor<f32>> {
        let mut hits = self.entries.iter().filter(|e| e.name == name);
        let e = hits.next().ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if hits.next().is_some() {
            return Err(Error::InvalidArgument(format!("tensor `{name}` listed more than once")));
        }
        if e.shape != expected || e.numel != expected.iter().product::<usize>() {
            return Err(Error::TensorShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        let needed = 4 * e.numel;
        if e.offset + needed > self.blob.len() {
            return Err(Error::MissingTensorBytes {
                name: name.to_string(),
                offset: e.offset,
                needed,
                available: self.blob.len(),
            });
        }
        let data = self.blob[e.offset..e.offset + needed]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Tensor::from_vec(&e.shape, data))
    }

    fn check_totals(&self, expected_names: usize) -> Result<()> {
        if self.entries.len() != expected_names {
            return Err(Error::InvalidArgument(format!(
                "checkpoint lists {} tensors, the architecture has {expected_names}",
                self.entries.len()
            )));
        }
        let expected: usize = self.entries.iter().map(|e| 4 * e.numel).sum();
        if self.blob.len() != expected {
            return Err(Error::BlobLength {
                expected,
                found: self.blob.len(),
            });
        }
        Ok(())
    }
}

/// Writes the model in f32 regardless of its working precision.
pub fn save_checkpoint<T: Scalar>(model: &WaveFlowModel<T>, base: impl AsRef<Path>, meta: TrainingMeta) -> Result<()> {
    let tensors: Vec<(String, Tensor<f32>)> = model
        .params
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.cast()))
        .collect();
    let mut header = BTreeMap::new();
    header.insert("config".to_string(), serde_json::to_value(&model.config)?);
    header.insert("training".to_string(), serde_json::to_value(meta)?);
    write_bundle(base.as_ref(), header, &tensors)
}

pub fn load_checkpoint<T: Scalar>(base: impl AsRef<Path>) -> Result<(WaveFlowModel<T>, TrainingMeta)> {
    let bundle = read_bundle(base.as_ref())?;
    let config: ModelConfig = serde_json::from_value(bundle.manifest.get("config").cloned().unwrap_or(Value::Null))?;
    config.validate()?;
    let meta: TrainingMeta = match bundle.manifest.get("training") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => TrainingMeta::default(),
    };
    // the skeleton fixes names and shapes; its values are overwritten
    let mut model = WaveFlowModel::<T>::init(&config, 0)?;
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let name = model.params.name(id).to_string();
        let shape = model.params.get(id).shape().to_vec();
        let t = bundle.tensor(&name, &shape)?;
        *model.params.get_mut(id) = t.cast();
    }
    bundle.check_totals(ids.len())?;
    Ok((model, meta))
}

/// Caches a mel spectrogram in the same bundle format.
pub fn save_mel(mel: &MelSpectrogram, base: impl AsRef<Path>) -> Result<()> {
    let mut header = BTreeMap::new();
    header.insert("kind".to_string(), json!("mel"));
    header.insert("hop".to_string(), json!(mel.hop));
    write_bundle(base.as_ref(), header, &[("mel".to_string(), mel.to_tensor())])
}

pub fn load_mel(base: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let bundle = read_bundle(base.as_ref())?;
    let hop = bundle.manifest.get("hop").and_then(Value::as_u64).unwrap_or(0) as usize;
    let shape = bundle
        .entries
        .iter()
        .find(|e| e.name == "mel")
        .map(|e| e.shape.clone())
        .ok_or_else(|| Error::MissingTensor("mel".into()))?;
    if shape.len() != 2 {
        return Err(Error::TensorShapeMismatch {
            name: "mel".into(),
            expected: vec![0, 0],
            found: shape,
        });
    }
    let t = bundle.tensor("mel", &shape)?;
    bundle.check_totals(1)?;
    MelSpectrogram::from_tensor(&t, hop)
}
