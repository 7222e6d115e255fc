//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `QACKPT1\n`, a little-endian `u64` length, that
//! many bytes of JSON metadata, then every tensor as little-endian `f64`s.
//! Tensor offsets in the metadata are byte offsets into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::{AdamState, RngState, TrainState};

pub const MAGIC: &[u8; 8] = b"QACKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";
const PARAM: &str = "param/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    version: u32,
    config: ModelConfig,
    glove_path: Option<String>,
    iteration: u64,
    adam_step: u64,
    rng: RngState,
    epoch_order: Vec<usize>,
    cursor: usize,
    best_dev_f1: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Embedding file the model was trained with.
    pub glove_path: Option<String>,
    pub params: ModelParams,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push((format!("{PARAM}{name}"), t));
        }
        for (name, t) in &self.state.adam.first {
            tensors.push((format!("{FIRST_MOMENT}{name}"), t));
        }
        for (name, t) in &self.state.adam.second {
            tensors.push((format!("{SECOND_MOMENT}{name}"), t));
        }

        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let meta = Metadata {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            glove_path: self.glove_path.clone(),
            iteration: self.state.iteration,
            adam_step: self.state.adam.step,
            rng: self.state.rng.clone(),
            epoch_order: self.state.epoch_order.clone(),
            cursor: self.state.cursor,
            best_dev_f1: self.state.best_dev_f1,
            tensors: entries,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| QaError::Checkpoint(e.to_string()))?;

        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(QaError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] = rest
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| QaError::Truncated("missing metadata length".into()))?;
        let meta_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| QaError::Truncated("metadata length overflows".into()))?;
        let rest = &rest[8..];
        if rest.len() < meta_len {
            return Err(QaError::Truncated(format!(
                "metadata needs {meta_len} bytes, {} present",
                rest.len()
            )));
        }
        let meta: Metadata =
            serde_json::from_slice(&rest[..meta_len]).map_err(|e| QaError::Checkpoint(e.to_string()))?;
        if meta.version != FORMAT_VERSION {
            return Err(QaError::Version {
                found: meta.version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = &rest[meta_len..];

        let mut params = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for entry in &meta.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = usize::try_from(entry.offset)
                .map_err(|_| QaError::Truncated(format!("offset of {} overflows", entry.name)))?;
            let end = start
                .checked_add(8 * numel)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| QaError::Truncated(format!("tensor {} extends past end of file", entry.name)))?;
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| QaError::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
            let (map, name) = if let Some(n) = entry.name.strip_prefix(PARAM) {
                (&mut params, n)
            } else if let Some(n) = entry.name.strip_prefix(FIRST_MOMENT) {
                (&mut first, n)
            } else if let Some(n) = entry.name.strip_prefix(SECOND_MOMENT) {
                (&mut second, n)
            } else {
                return Err(QaError::Checkpoint(format!("unknown tensor {}", entry.name)));
            };
            if map.insert(name.to_string(), tensor).is_some() {
                return Err(QaError::Checkpoint(format!("duplicate tensor {}", entry.name)));
            }
        }

        meta.config.validate()?;
        let params = ModelParams::from_map(params);
        params.validate(&meta.config)?;
        for moments in [&first, &second] {
            let matches = moments.len() == params.len()
                && params
                    .iter()
                    .all(|(n, t)| moments.get(n).is_some_and(|m| m.shape() == t.shape()));
            if !matches {
                return Err(QaError::Checkpoint("optimizer moments do not match the parameters".into()));
            }
        }
        Ok(Self {
            config: meta.config,
            glove_path: meta.glove_path,
            params,
            state: TrainState {
                iteration: meta.iteration,
                adam: AdamState {
                    step: meta.adam_step,
                    first,
                    second,
                },
                rng: meta.rng,
                epoch_order: meta.epoch_order,
                cursor: meta.cursor,
                best_dev_f1: meta.best_dev_f1,
            },
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = temp_path(path);
        let write_err = |source| QaError::Write {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(&tmp).map_err(write_err)?;
        file.write_all(&bytes).map_err(write_err)?;
        file.sync_all().map_err(write_err)?;
        drop(file);
        fs::rename(&tmp, path).map_err(write_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| QaError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
