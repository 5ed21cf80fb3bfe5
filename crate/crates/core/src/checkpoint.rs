//! Checkpoint format: a JSON manifest describing parameter names, shapes,
//! and byte offsets, next to a flat little-endian f64 blob.
//!
//! A checkpoint directory holds `manifest.json` and `params.bin`. Loading
//! verifies every name and shape against the receiving parameter store and
//! fails on any mismatch, so a checkpoint can never silently reinterpret
//! parameters.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in bytes.
    pub offset: usize,
    /// Element count (shape product), for convenience.
    pub len: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ManifestEntry>,
    pub total_values: usize,
}

/// Write `manifest.json` and `params.bin` into `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_values() * 8);
    for (name, tensor) in store.iter() {
        let data = tensor.value();
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape(),
            offset: blob.len(),
            len: data.len(),
        });
        for v in &data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: *cfg,
        params: entries,
        total_values: store.total_values(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    // write-then-rename so a crash never leaves a torn checkpoint behind
    let tmp_manifest = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let tmp_blob = dir.join(format!("{BLOB_FILE}.tmp"));
    fs::File::create(&tmp_manifest)?.write_all(json.as_bytes())?;
    fs::File::create(&tmp_blob)?.write_all(&blob)?;
    fs::rename(&tmp_manifest, dir.join(MANIFEST_FILE))?;
    fs::rename(&tmp_blob, dir.join(BLOB_FILE))?;
    Ok(())
}

/// A loaded checkpoint, not yet bound to any parameter store.
pub struct Checkpoint {
    pub manifest: Manifest,
    values: Vec<f64>,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            std::io::Error::new(e.kind(), format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest parse error: {e}")))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                manifest.version
            )));
        }
        let blob = fs::read(dir.join(BLOB_FILE))?;
        if blob.len() != manifest.total_values * 8 {
            return Err(Error::Format(format!(
                "blob holds {} bytes, manifest promises {}",
                blob.len(),
                manifest.total_values * 8
            )));
        }
        let mut values = Vec::with_capacity(manifest.total_values);
        for chunk in blob.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        for e in &manifest.params {
            let prod: usize = e.shape.iter().product();
            if prod != e.len || e.offset % 8 != 0 || e.offset / 8 + e.len > values.len() {
                return Err(Error::Format(format!(
                    "manifest entry {} is inconsistent with the blob",
                    e.name
                )));
            }
        }
        Ok(Checkpoint { manifest, values })
    }

    /// Copy values into `store`, verifying the parameter sets match by name
    /// and shape. Extra or missing names on either side are errors.
    pub fn apply(&self, store: &ParamStore) -> Result<()> {
        if store.len() != self.manifest.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, store has {}",
                self.manifest.params.len(),
                store.len()
            )));
        }
        for e in &self.manifest.params {
            let tensor = store.get(&e.name).ok_or_else(|| {
                Error::Format(format!("checkpoint parameter {} missing from model", e.name))
            })?;
            if tensor.shape() != e.shape {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} in model",
                    e.name,
                    e.shape,
                    tensor.shape()
                )));
            }
            let start = e.offset / 8;
            tensor.set_data(self.values[start..start + e.len].to_vec());
        }
        Ok(())
    }
}

/// Rebuild a model from a checkpoint directory: construct from the stored
/// config, then overwrite every parameter.
pub fn load_model(dir: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(dir)?;
    let model = Model::new(ckpt.manifest.config, 0)?;
    ckpt.apply(&model.store)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::small();
        cfg.d_m = 16;
        cfg.heads = 2;
        cfg.i_e = 1;
        cfg.i_dd = 1;
        cfg.i_dc = 1;
        cfg.k_modes = 2;
        Model::new(cfg, seed).unwrap()
    }

    fn tempdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lf_ckpt_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn roundtrip_restores_every_value_bitwise() {
        let model = tiny_model(42);
        let dir = tempdir("roundtrip");
        save_checkpoint(&dir, &model.cfg, &model.store).unwrap();
        let reloaded = load_model(&dir).unwrap();
        assert_eq!(reloaded.cfg, model.cfg);
        for (name, t) in model.store.iter() {
            let r = reloaded.store.get(name).unwrap();
            let (a, b) = (t.value(), r.value());
            assert_eq!(a.len(), b.len(), "{name}");
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let model = tiny_model(7);
        let d1 = tempdir("bytes1");
        let d2 = tempdir("bytes2");
        save_checkpoint(&d1, &model.cfg, &model.store).unwrap();
        save_checkpoint(&d2, &model.cfg, &model.store).unwrap();
        assert_eq!(
            fs::read(d1.join(MANIFEST_FILE)).unwrap(),
            fs::read(d2.join(MANIFEST_FILE)).unwrap()
        );
        assert_eq!(
            fs::read(d1.join(BLOB_FILE)).unwrap(),
            fs::read(d2.join(BLOB_FILE)).unwrap()
        );
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = tiny_model(8);
        let dir = tempdir("shape");
        save_checkpoint(&dir, &model.cfg, &model.store).unwrap();
        // tamper: swap a shape in the manifest
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut manifest: Manifest = serde_json::from_str(&text).unwrap();
        manifest.params[0].shape = vec![1, manifest.params[0].len];
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let ckpt = Checkpoint::load(&dir).unwrap();
        let err = ckpt.apply(&model.store).err().unwrap();
        assert!(matches!(err, Error::Format(_)), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = tiny_model(9);
        let dir = tempdir("blob");
        save_checkpoint(&dir, &model.cfg, &model.store).unwrap();
        let blob = fs::read(dir.join(BLOB_FILE)).unwrap();
        fs::write(dir.join(BLOB_FILE), &blob[..blob.len() - 8]).unwrap();
        let err = Checkpoint::load(&dir).err().unwrap();
        assert!(matches!(err, Error::Format(_)), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_parameter_name_is_rejected() {
        let model = tiny_model(10);
        let dir = tempdir("name");
        save_checkpoint(&dir, &model.cfg, &model.store).unwrap();
        let path = dir.join(MANIFEST_FILE);
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest.params[0].name = "no.such.param".into();
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let ckpt = Checkpoint::load(&dir).unwrap();
        assert!(ckpt.apply(&model.store).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
