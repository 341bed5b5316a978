//! Checkpoint container: the magic `EMCKPT\0\0`, a little-endian `u64`
//! manifest length, the JSON manifest, then every tensor as little-endian
//! f32 in manifest order.

use super::{EpochRecord, TrainConfig, TrainError};
use crate::corpus::ModifierSchema;
use crate::featurize::{FeatureConfig, TokenizerVocab};
use crate::model::{ClassificationHead, EncoderConfig, EncoderParams, MultiTaskModel};
use crate::util::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EMCKPT\0\0";

/// Training provenance carried with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Corpora the parameters were fitted on, oldest first.
    pub chain: Vec<String>,
    pub train_config: Option<TrainConfig>,
    /// sha256 of the serialized train config.
    pub train_fingerprint: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Epoch log without wall-clock times.
    pub history: Vec<EpochRecord>,
}

/// A trained model with everything needed to encode new text for it.
/// Parameters are held at f32 precision, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: MultiTaskModel,
    pub vocab: TokenizerVocab,
    pub features: FeatureConfig,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    schema: ModifierSchema,
    encoder: EncoderConfig,
    head_labels: Vec<(String, Vec<String>)>,
    features: FeatureConfig,
    vocab: TokenizerVocab,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn round_to_f32(model: &mut MultiTaskModel) {
    for t in model.tensors_mut() {
        for x in t.data.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
}

impl Checkpoint {
    pub fn new(mut model: MultiTaskModel, vocab: TokenizerVocab, features: FeatureConfig, mut meta: CheckpointMeta) -> Self {
        round_to_f32(&mut model);
        for r in &mut meta.history {
            r.seconds = None;
        }
        if let Some(cfg) = &meta.train_config {
            meta.train_fingerprint = cfg.fingerprint();
        }
        Self {
            format_version: CHECKPOINT_VERSION,
            model,
            vocab,
            features,
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.model.tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for t in &tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32le".into(),
                offset,
            });
            offset += t.data.len() * 4;
        }
        let manifest = Manifest {
            format_version: self.format_version,
            schema: self.model.schema.clone(),
            encoder: self.model.config.clone(),
            head_labels: self.model.heads.iter().map(|h| (h.modifier.clone(), h.labels.clone())).collect(),
            features: self.features,
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &tensors {
            for &x in t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self, TrainError> {
        let corrupt = |why: &str| TrainError::CorruptCheckpoint {
            path: origin.to_path_buf(),
            reason: why.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| corrupt("truncated manifest"))?;
        let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| corrupt(&e.to_string()))?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(TrainError::CheckpointVersionMismatch {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| corrupt(&e.to_string()))?;
        let payload = &bytes[16 + len..];

        let cfg = manifest.encoder.clone();
        cfg.validate().map_err(|e| corrupt(&e.to_string()))?;
        let mut model = MultiTaskModel {
            schema: manifest.schema,
            config: cfg.clone(),
            encoder: EncoderParams::zeros(&cfg),
            heads: manifest
                .head_labels
                .iter()
                .map(|(m, labels)| ClassificationHead::init(m, labels, cfg.hidden_size, 0).zeros_like())
                .collect(),
        };
        {
            let tensors = model.tensors_mut();
            if tensors.len() != manifest.tensors.len() {
                return Err(corrupt("tensor count differs from configuration"));
            }
            for (t, e) in tensors.into_iter().zip(&manifest.tensors) {
                if t.name != e.name || t.shape != e.shape || e.dtype != "f32le" {
                    return Err(corrupt(&format!("tensor {} does not match configuration", e.name)));
                }
                let end = e.offset + t.data.len() * 4;
                let raw = payload.get(e.offset..end).ok_or_else(|| corrupt("truncated payload"))?;
                for (x, c) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                    *x = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                }
            }
        }
        model.validate().map_err(|e| corrupt(&e.to_string()))?;
        if model.config.vocab_size != manifest.vocab.len() {
            return Err(corrupt("vocabulary size differs from embedding table"));
        }
        Ok(Self {
            format_version: manifest.format_version,
            model,
            vocab: manifest.vocab,
            features: manifest.features,
            meta: manifest.meta,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}
