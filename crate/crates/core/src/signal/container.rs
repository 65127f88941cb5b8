//! On-disk container: a directory holding `manifest.json` plus one raw blob
//! file of little-endian IEEE-754 values, row-major. Datasets store `f32`;
//! model checkpoints reuse the envelope with `f64` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spectrogram::{class_counts, Activity, Modality, Spectrogram, SyncedSample};
use super::synth::GeneratorParams;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const DATASET_BLOB: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Location of one tensor inside a blob file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub modality: Modality,
    #[serde(flatten)]
    pub blob: BlobRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: u64,
    pub label: Activity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<u32>,
    pub views: Vec<ViewEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorParams>,
    pub samples: Vec<SampleEntry>,
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Append `f32` values to `buf`, returning the reference for `file`.
pub(crate) fn push_f32(buf: &mut Vec<u8>, file: &str, shape: &[usize], values: &[f32]) -> BlobRef {
    let offset = buf.len() as u64;
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    BlobRef {
        shape: shape.to_vec(),
        dtype: Dtype::F32,
        file: file.to_string(),
        byte_offset: offset,
        byte_length: buf.len() as u64 - offset,
    }
}

pub(crate) fn push_f64(buf: &mut Vec<u8>, file: &str, shape: &[usize], values: &[f64]) -> BlobRef {
    let offset = buf.len() as u64;
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    BlobRef {
        shape: shape.to_vec(),
        dtype: Dtype::F64,
        file: file.to_string(),
        byte_offset: offset,
        byte_length: buf.len() as u64 - offset,
    }
}

/// Slice the bytes of `r` out of `blob`, validating length against shape.
pub(crate) fn blob_bytes<'a>(blob: &'a [u8], r: &BlobRef, what: &str) -> Result<&'a [u8]> {
    let n: usize = r.shape.iter().product();
    let expected = (n * r.dtype.size()) as u64;
    if r.shape.is_empty() || r.shape.contains(&0) {
        return Err(Error::Format(format!("{what}: invalid shape {:?}", r.shape)));
    }
    if r.byte_length != expected {
        return Err(Error::Format(format!(
            "{what}: byte_length {} does not match shape {:?} ({expected} bytes)",
            r.byte_length, r.shape
        )));
    }
    let end = r
        .byte_offset
        .checked_add(r.byte_length)
        .filter(|&e| e <= blob.len() as u64)
        .ok_or_else(|| {
            Error::Format(format!(
                "{what}: blob truncated (needs bytes {}..{}, file has {})",
                r.byte_offset,
                r.byte_offset + r.byte_length,
                blob.len()
            ))
        })?;
    Ok(&blob[r.byte_offset as usize..end as usize])
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn decode_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

pub(crate) fn read_blobs(dir: &Path, files: impl IntoIterator<Item = String>) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for f in files {
        if out.contains_key(&f) {
            continue;
        }
        if f.contains('/') || f.contains('\\') || f == ".." {
            return Err(Error::Format(format!("blob file name '{f}' must be a plain file name")));
        }
        let p = dir.join(&f);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        out.insert(f, bytes);
    }
    Ok(out)
}

/// Write `samples` to the container directory `dir` (created if needed).
pub fn save_dataset(samples: &[SyncedSample], generator: Option<&GeneratorParams>, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let views = s
            .views
            .values()
            .map(|v| ViewEntry {
                modality: v.modality,
                blob: push_f32(&mut blob, DATASET_BLOB, &[v.height(), v.width()], v.values()),
            })
            .collect();
        entries.push(SampleEntry {
            id: s.id,
            label: s.label,
            subject: s.subject,
            layout: s.layout,
            position: s.position,
            views,
        });
    }
    let counts = class_counts(samples);
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        class_counts: Activity::ALL
            .iter()
            .map(|a| (a.name().to_string(), counts[a.index()]))
            .collect(),
        generator: generator.cloned(),
        samples: entries,
    };
    let blob_path = dir.join(DATASET_BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Read a dataset container, validating every blob reference.
pub fn load_dataset(dir: &Path) -> Result<(Vec<SyncedSample>, DatasetManifest)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let files = manifest
        .samples
        .iter()
        .flat_map(|s| s.views.iter().map(|v| v.blob.file.clone()));
    let blobs = read_blobs(dir, files)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let mut views = BTreeMap::new();
        for v in &entry.views {
            let what = format!("sample {} view {}", entry.id, v.modality);
            if v.blob.dtype != Dtype::F32 || v.blob.shape.len() != 2 {
                return Err(Error::Format(format!("{what}: expected a 2-D f32 tensor")));
            }
            let bytes = blob_bytes(&blobs[&v.blob.file], &v.blob, &what)?;
            let spec = Spectrogram::new(v.modality, v.blob.shape[0], v.blob.shape[1], decode_f32(bytes))
                .map_err(|e| Error::Format(format!("{what}: {e}")))?;
            if views.insert(v.modality, spec).is_some() {
                return Err(Error::Format(format!("{what}: duplicate view")));
            }
        }
        samples.push(SyncedSample {
            id: entry.id,
            label: entry.label,
            views,
            subject: entry.subject,
            layout: entry.layout,
            position: entry.position,
        });
    }
    Ok((samples, manifest))
}
