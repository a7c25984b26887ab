//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! JSON manifest, then every blob listed in the manifest as little-endian
//! `f64` values in manifest order. All integers are little-endian.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelSpec;
use super::state::{ModelState, Provenance};
use crate::alignment::Projection;
use crate::error::{GmopeError, Result};
use crate::experts::{ExpertEnsemble, GcnEncoder};
use crate::objectives::{HeadKind, TaskHead};
use crate::prompt::PromptBank;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GMOPECKP";
const HEADER_LEN: usize = 8 + 4 + 8;

/// Model state plus the resolved configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: serde_json::Value,
    pub state: ModelState<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectionEntry {
    dataset: String,
    rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config_hash: String,
    config: serde_json::Value,
    spec: ModelSpec,
    provenance: Provenance,
    prompt_init_seed: u64,
    head: Option<HeadKind>,
    projections: Vec<ProjectionEntry>,
    blobs: Vec<BlobEntry>,
    payload_sha256: String,
}

fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("JSON values serialize")))
}

struct Blobs {
    entries: Vec<BlobEntry>,
    payload: Vec<u8>,
}

impl Blobs {
    fn push<'a, T: Scalar>(&mut self, name: String, shape: Vec<usize>, values: impl IntoIterator<Item = &'a T>) {
        for v in values {
            self.payload.extend(v.to_f64_lossless().to_le_bytes());
        }
        self.entries.push(BlobEntry { name, shape });
    }
}

pub fn encode_checkpoint<T: Scalar>(checkpoint: &Checkpoint<T>) -> Result<Vec<u8>> {
    let state = &checkpoint.state;
    let mut blobs = Blobs {
        entries: Vec::new(),
        payload: Vec::new(),
    };
    let p = state.bank.prompts();
    blobs.push("prompts".into(), p.shape().to_vec(), p.iter());
    for (m, expert) in state.ensemble.experts().iter().enumerate() {
        for (l, (w, b)) in expert.weights().iter().zip(expert.biases()).enumerate() {
            blobs.push(format!("expert.{m}.layer.{l}.weight"), w.shape().to_vec(), w.iter());
            blobs.push(format!("expert.{m}.layer.{l}.bias"), b.shape().to_vec(), b.iter());
        }
    }
    for (m, d) in state.discriminators.iter().enumerate() {
        blobs.push(format!("discriminator.{m}"), d.shape().to_vec(), d.iter());
    }
    if let Some(h) = &state.head {
        blobs.push("head.weight".into(), h.weight.shape().to_vec(), h.weight.iter());
        blobs.push("head.bias".into(), h.bias.shape().to_vec(), h.bias.iter());
    }
    let mut projections = Vec::new();
    for (name, proj) in &state.projections {
        blobs.push(format!("projection.{name}.basis"), proj.basis().shape().to_vec(), proj.basis().iter());
        blobs.push(
            format!("projection.{name}.singular_values"),
            proj.singular_values().shape().to_vec(),
            proj.singular_values().iter(),
        );
        projections.push(ProjectionEntry {
            dataset: name.clone(),
            rank: proj.rank(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        config_hash: config_hash(&checkpoint.config),
        config: checkpoint.config.clone(),
        spec: state.spec,
        provenance: state.provenance.clone(),
        prompt_init_seed: state.bank.init_seed(),
        head: state.head.as_ref().map(TaskHead::kind),
        projections,
        blobs: blobs.entries,
        payload_sha256: hex::encode(Sha256::digest(&blobs.payload)),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| GmopeError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blobs.payload.len());
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(blobs.payload);
    Ok(out)
}

fn truncated(offset: usize, message: impl Into<String>) -> GmopeError {
    GmopeError::Truncated {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(truncated(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
    }
    if &bytes[..8] != MAGIC {
        return Err(GmopeError::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(GmopeError::Manifest(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest_end = HEADER_LEN
        .checked_add(manifest_len)
        .ok_or_else(|| GmopeError::Integrity("manifest length overflows".into()))?;
    if bytes.len() < manifest_end {
        return Err(truncated(bytes.len(), format!("manifest ends at byte {manifest_end}")));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| GmopeError::Manifest(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(GmopeError::Integrity("manifest and header disagree on the format version".into()));
    }
    if manifest.config_hash != config_hash(&manifest.config) {
        return Err(GmopeError::Integrity("config hash does not match the embedded configuration".into()));
    }

    let mut offset = manifest_end;
    let mut values: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for blob in &manifest.blobs {
        let count: usize = blob.shape.iter().product();
        let end = offset + count * 8;
        if bytes.len() < end {
            return Err(truncated(bytes.len(), format!("blob '{}' spans bytes {offset}..{end}", blob.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.insert(blob.name.clone(), (blob.shape.clone(), data));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(GmopeError::Integrity(format!(
            "{} unexpected trailing bytes after offset {offset}",
            bytes.len() - offset
        )));
    }
    if hex::encode(Sha256::digest(&bytes[manifest_end..])) != manifest.payload_sha256 {
        return Err(GmopeError::Integrity("parameter payload checksum mismatch".into()));
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<T>)> {
        let (shape, data) = values
            .remove(name)
            .ok_or_else(|| GmopeError::Manifest(format!("missing blob '{name}'")))?;
        Ok((shape, data.into_iter().map(T::from_f64_lossy).collect()))
    };
    let matrix = |(shape, data): (Vec<usize>, Vec<T>)| -> Result<Array2<T>> {
        match shape.as_slice() {
            [r, c] => Array2::from_shape_vec((*r, *c), data).map_err(|e| GmopeError::Manifest(e.to_string())),
            _ => Err(GmopeError::Manifest(format!("expected a matrix, got shape {shape:?}"))),
        }
    };
    let vector = |(shape, data): (Vec<usize>, Vec<T>)| -> Result<Array1<T>> {
        match shape.as_slice() {
            [_] => Ok(Array1::from(data)),
            _ => Err(GmopeError::Manifest(format!("expected a vector, got shape {shape:?}"))),
        }
    };
    let spec = manifest.spec;
    let bank = PromptBank::from_matrix(matrix(take("prompts")?)?, manifest.prompt_init_seed)?;
    let mut experts = Vec::with_capacity(spec.experts);
    for m in 0..spec.experts {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.encoder.layers {
            weights.push(matrix(take(&format!("expert.{m}.layer.{l}.weight"))?)?);
            biases.push(vector(take(&format!("expert.{m}.layer.{l}.bias"))?)?);
        }
        experts.push(GcnEncoder::from_parts(spec.encoder, weights, biases)?);
    }
    let ensemble = ExpertEnsemble::from_experts(spec.encoder, experts)?;
    let discriminators = (0..spec.experts)
        .map(|m| matrix(take(&format!("discriminator.{m}"))?))
        .collect::<Result<Vec<_>>>()?;
    let head = match manifest.head {
        Some(kind) => Some(TaskHead::from_parts(
            kind,
            matrix(take("head.weight")?)?,
            vector(take("head.bias")?)?,
        )?),
        None => None,
    };
    let mut projections = BTreeMap::new();
    for entry in &manifest.projections {
        let basis = matrix(take(&format!("projection.{}.basis", entry.dataset))?)?;
        let sv = vector(take(&format!("projection.{}.singular_values", entry.dataset))?)?;
        projections.insert(entry.dataset.clone(), Projection::from_parts(basis, sv, entry.rank)?);
    }
    if bank.experts() != spec.experts || bank.width() != spec.prompt_dim {
        return Err(GmopeError::Manifest("prompt matrix disagrees with the model spec".into()));
    }
    Ok(Checkpoint {
        config: manifest.config,
        state: ModelState {
            spec,
            ensemble,
            bank,
            discriminators,
            head,
            projections,
            provenance: manifest.provenance,
        },
    })
}

pub fn save_checkpoint<T: Scalar>(checkpoint: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(checkpoint)?;
    std::fs::write(path, bytes).map_err(|e| GmopeError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| GmopeError::io(path, e))?;
    decode_checkpoint(&bytes)
}
