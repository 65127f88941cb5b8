//! Model checkpoints: the dataset container envelope holding named `f64`
//! tensors plus a JSON header with the bundle configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{BundleConfig, ModelBundle};
use crate::error::{Error, Result};
use crate::signal::container::{blob_bytes, decode_f64, push_f64, read_blobs, read_json, write_json, BlobRef, Dtype, FORMAT_VERSION, MANIFEST};

pub const CHECKPOINT_BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedBlob {
    pub name: String,
    #[serde(flatten)]
    pub blob: BlobRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub bundle: BundleConfig,
    /// Frozen flags in the order encoders..., heads, classifier.
    pub frozen: Vec<bool>,
    /// Free-form run metadata (split seed, source dataset, ...).
    #[serde(default)]
    pub extras: serde_json::Value,
    pub tensors: Vec<NamedBlob>,
}

pub fn save_checkpoint(bundle: &ModelBundle, extras: serde_json::Value, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut b = bundle.clone();
    let mut blob = Vec::new();
    let tensors = b
        .named_tensors_mut()
        .into_iter()
        .map(|(name, t)| NamedBlob {
            blob: push_f64(&mut blob, CHECKPOINT_BLOB, t.shape(), t.data()),
            name,
        })
        .collect();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        bundle: bundle.config.clone(),
        frozen: bundle.frozen_flags(),
        extras,
        tensors,
    };
    let blob_path = dir.join(CHECKPOINT_BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelBundle, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format_version {}",
            manifest.format_version
        )));
    }
    let mut bundle = ModelBundle::new(manifest.bundle.clone()).map_err(|e| e.context("checkpoint header"))?;
    let blobs = read_blobs(dir, manifest.tensors.iter().map(|t| t.blob.file.clone()))?;
    {
        let mut slots = bundle.named_tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, model needs {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&manifest.tensors) {
            let what = format!("tensor {}", entry.name);
            if *name != entry.name {
                return Err(Error::Format(format!("{what}: expected '{name}' at this position")));
            }
            if entry.blob.dtype != Dtype::F64 || entry.blob.shape != slot.shape() {
                return Err(Error::Format(format!(
                    "{what}: expected f64 {:?}, found {:?} {:?}",
                    slot.shape(),
                    entry.blob.dtype,
                    entry.blob.shape
                )));
            }
            let bytes = blob_bytes(&blobs[&entry.blob.file], &entry.blob, &what)?;
            slot.data_mut().copy_from_slice(&decode_f64(bytes));
        }
    }
    bundle.set_frozen_flags(&manifest.frozen)?;
    Ok((bundle, manifest))
}
