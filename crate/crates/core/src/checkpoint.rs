//! Binary checkpoint format.
//!
//! ```text
//! "ATTNET01"                       8 bytes
//! manifest length                  u64, little-endian
//! manifest                         UTF-8 JSON
//! payload                          raw little-endian f32
//! ```
//!
//! The manifest carries the model config, vocabulary, class labels and a
//! tensor table of `{name, shape, dtype, byte_offset, byte_length}` with
//! offsets relative to the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result};
use crate::model::{self, ModelConfig};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::text::{LabelMap, Vocabulary};

pub const MAGIC: &[u8; 8] = b"ATTNET01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub labels: LabelMap,
    pub params: Parameters<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    vocabulary: Vocabulary,
    labels: LabelMap,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_length: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.params.count() * 4);
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: offset,
                byte_length: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            labels: self.labels.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| FormatError::Manifest(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint; nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(FormatError::Truncated("missing manifest length".into()).into());
        }
        let manifest_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
        let rest = &rest[8..];
        if (rest.len() as u64) < manifest_len {
            return Err(FormatError::Truncated(format!(
                "manifest declares {manifest_len} bytes, {} available",
                rest.len()
            ))
            .into());
        }
        let (json, payload) = rest.split_at(manifest_len as usize);
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| FormatError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(FormatError::ManifestMismatch(format!(
                "unsupported format version {}",
                manifest.format_version
            ))
            .into());
        }

        let mut params = Parameters::new();
        let mut end = 0u64;
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(FormatError::ManifestMismatch(format!(
                    "{}: unsupported dtype {:?}",
                    entry.name, entry.dtype
                ))
                .into());
            }
            let count: usize = entry.shape.iter().product();
            if entry.shape.is_empty() || count == 0 || entry.byte_length != 4 * count as u64 {
                return Err(FormatError::ManifestMismatch(format!(
                    "{}: {} bytes cannot hold shape {:?}",
                    entry.name, entry.byte_length, entry.shape
                ))
                .into());
            }
            let stop = entry.byte_offset.checked_add(entry.byte_length);
            let stop = match stop {
                Some(s) if s <= payload.len() as u64 => s,
                _ => {
                    return Err(FormatError::Truncated(format!(
                        "tensor {} needs payload bytes up to {}, payload has {}",
                        entry.name,
                        entry.byte_offset.saturating_add(entry.byte_length),
                        payload.len()
                    ))
                    .into())
                }
            };
            let raw = &payload[entry.byte_offset as usize..stop as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if params.contains(&entry.name) {
                return Err(FormatError::ManifestMismatch(format!(
                    "duplicate tensor {}",
                    entry.name
                ))
                .into());
            }
            params.insert(
                entry.name.clone(),
                Tensor::new(entry.shape.clone(), data)
                    .map_err(|e| FormatError::ManifestMismatch(e.to_string()))?,
            );
            end = end.max(stop);
        }
        if end != payload.len() as u64 {
            return Err(FormatError::ManifestMismatch(format!(
                "payload has {} bytes, manifest accounts for {end}",
                payload.len()
            ))
            .into());
        }
        model::check_parameters(&params, &manifest.config)
            .map_err(|e| FormatError::ManifestMismatch(e.to_string()))?;
        if manifest.vocabulary.len() != manifest.config.vocab_size {
            return Err(FormatError::ManifestMismatch(format!(
                "vocabulary has {} entries, config says {}",
                manifest.vocabulary.len(),
                manifest.config.vocab_size
            ))
            .into());
        }
        if manifest.labels.len() != manifest.config.classes {
            return Err(FormatError::ManifestMismatch(format!(
                "{} labels for {} classes",
                manifest.labels.len(),
                manifest.config.classes
            ))
            .into());
        }
        Ok(Self {
            config: manifest.config,
            vocabulary: manifest.vocabulary,
            labels: manifest.labels,
            params,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
