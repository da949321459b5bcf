//! Checkpoint directories: `manifest.json` + `params.bin`.
//!
//! `params.bin` is the concatenation of every tensor as little-endian f32, in
//! manifest order. The manifest records the byte offset and length of each
//! tensor together with the encoder config, heads, label catalog and
//! vocabulary needed to rebuild the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::model::{Encoder, TaskHead};
use super::params::ParameterStore;
use crate::corpus::LabelCatalog;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;
use crate::Task;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// The task this model was trained for; its head is authoritative.
    pub task: Option<Task>,
    pub config: EncoderConfig,
    pub heads: Vec<TaskHead>,
    pub catalog: LabelCatalog,
    pub vocabulary: Vocabulary,
    pub tensors: Vec<TensorEntry>,
}

/// A model together with the label space and vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub catalog: LabelCatalog,
    pub vocab: Vocabulary,
    pub task: Option<Task>,
}

impl Checkpoint {
    pub fn new(encoder: Encoder, catalog: LabelCatalog, vocab: Vocabulary, task: Option<Task>) -> Result<Self> {
        for h in encoder.heads() {
            let k = catalog.num_classes(h.task);
            if h.classes != k {
                return Err(Error::Checkpoint(format!(
                    "head {} has {} classes but catalog has {k}",
                    h.task, h.classes
                )));
            }
        }
        if encoder.config.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "encoder vocab_size {} but vocabulary has {} entries",
                encoder.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Checkpoint {
            encoder,
            catalog,
            vocab,
            task,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self, dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(dir)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let store = &ckpt.encoder.params;
    let mut blob = Vec::with_capacity(store.num_params() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for t in store.iter() {
        let offset = blob.len();
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        task: ckpt.task,
        config: ckpt.encoder.config.clone(),
        heads: ckpt.encoder.heads().to_vec(),
        catalog: ckpt.catalog.clone(),
        vocabulary: ckpt.vocab.clone(),
        tensors,
    };
    let params_path = dir.join(PARAMS_FILE);
    std::fs::write(&params_path, &blob).map_err(|e| Error::io(&params_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!(
        "{}: {e}",
        path.display()
    )))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "format version {version:?} not supported (expected {FORMAT_VERSION})"
        )));
    }
    serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let params_path = dir.join(PARAMS_FILE);
    let blob = std::fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let mut store = ParameterStore::new();
    let mut end = 0;
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor '{}' has dtype {}", t.name, t.dtype)));
        }
        let numel: usize = t.shape.iter().product();
        if t.length != numel * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' length {} disagrees with shape {:?}",
                t.name, t.length, t.shape
            )));
        }
        let stop = t.offset.checked_add(t.length).unwrap_or(usize::MAX);
        if stop > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' missing from {} (needs bytes {}..{}, file has {})",
                t.name,
                PARAMS_FILE,
                t.offset,
                stop,
                blob.len()
            )));
        }
        let data = blob[t.offset..stop]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(t.name.clone(), t.shape.clone(), data)?;
        end = end.max(stop);
    }
    if end != blob.len() {
        return Err(Error::Checkpoint(format!(
            "{} has {} trailing bytes not described by the manifest",
            PARAMS_FILE,
            blob.len() - end
        )));
    }
    let encoder = Encoder::from_parts(manifest.config, store, manifest.heads)?;
    Checkpoint::new(encoder, manifest.catalog, manifest.vocabulary, manifest.task)
}

/// Loads and insists on a specific encoder config.
pub fn load_checkpoint_expecting(dir: impl AsRef<Path>, expected: &EncoderConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    if &ckpt.encoder.config != expected {
        return Err(Error::Config(format!(
            "checkpoint config {:?} differs from expected {:?}",
            ckpt.encoder.config, expected
        )));
    }
    Ok(ckpt)
}
