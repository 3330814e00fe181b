//! Checkpoint files: a JSON manifest plus a little-endian `f32` blob stored
//! next to it with the `.bin` extension.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelState, ParamTensor, Params};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::PromptType;

pub const FORMAT: &str = "wsicl-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub prompt_type: PromptType,
    pub step: u64,
    pub seed: u64,
    pub blob: String,
    pub parameters: Vec<ParamEntry>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `params` under `manifest` with the given metadata.
pub fn save_params<T: Scalar>(manifest: &Path, config: &ModelConfig, params: &Params<T>, step: u64, seed: u64) -> Result<()> {
    let blob = blob_path(manifest);
    let mut bytes = Vec::with_capacity(params.len() * 4);
    let mut entries = Vec::with_capacity(params.tensors.len());
    for t in &params.tensors {
        entries.push(ParamEntry { name: t.name.clone(), shape: t.shape.clone(), offset: bytes.len(), length: t.data.len() });
        for &v in &t.data {
            (v.as_f64() as f32).write_le(&mut bytes);
        }
    }
    let m = CheckpointManifest {
        format: FORMAT.into(),
        config: config.clone(),
        prompt_type: config.prompt_type,
        step,
        seed,
        blob: blob.file_name().expect("blob file name").to_string_lossy().into_owned(),
        parameters: entries,
    };
    if let Some(dir) = manifest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_vec_pretty(&m).map_err(|e| Error::Json { path: manifest.to_owned(), source: e })?;
    fs::write(manifest, json).map_err(|e| Error::io(manifest, e))
}

pub fn save_checkpoint<T: Scalar>(manifest: &Path, state: &ModelState<T>) -> Result<()> {
    save_params(manifest, &state.config, &state.params, state.step, state.seed)
}

/// Reads a checkpoint, checking every tensor against the layout its config
/// implies.
pub fn load_params<T: Scalar>(manifest: &Path) -> Result<(CheckpointManifest, Params<T>)> {
    let raw = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: CheckpointManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Json { path: manifest.to_owned(), source: e })?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", m.format)));
    }
    if m.prompt_type != m.config.prompt_type {
        return Err(Error::Checkpoint("prompt_type disagrees with config".into()));
    }
    m.config.validate()?;
    let layout = ModelState::<T>::layout(&m.config);
    if layout.len() != m.parameters.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", layout.len(), m.parameters.len())));
    }
    let blob_file = manifest.with_file_name(&m.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.into_iter().zip(&m.parameters) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let end = entry.offset + 4 * n;
        if entry.length != n || end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor `{name}` exceeds the parameter blob")));
        }
        let data = blob[entry.offset..end].chunks_exact(4).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect();
        tensors.push(ParamTensor { name, shape, data });
    }
    Ok((m, Params { tensors }))
}

pub fn load_checkpoint<T: Scalar>(manifest: &Path) -> Result<ModelState<T>> {
    let (m, params) = load_params(manifest)?;
    Ok(ModelState { config: m.config, params, step: m.step, seed: m.seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { levels: 2, base_channels: 2, input_shape: [4, 4, 4], ..ModelConfig::default() }
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        let mut s = ModelState::<f32>::init(tiny(), 3).unwrap();
        s.step = 17;
        save_checkpoint(&p, &s).unwrap();
        assert_eq!(load_checkpoint::<f32>(&p).unwrap(), s);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        save_checkpoint(&p, &ModelState::<f32>::init(tiny(), 3).unwrap()).unwrap();
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        m["config"]["base_channels"] = 3.into();
        fs::write(&p, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        save_checkpoint(&p, &ModelState::<f32>::init(tiny(), 3).unwrap()).unwrap();
        let b = blob_path(&p);
        let bytes = fs::read(&b).unwrap();
        fs::write(&b, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint::<f32>(&p).is_err());
    }
}
