//! Checkpoint files: `HSCK`, a little-endian `u32` header length, the JSON
//! header, then one length-prefixed tensor blob per header entry, and a
//! trailing CRC32 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

use super::model::Dit;
use super::params::{Adam, ParamStore};
use super::DiTConfig;
use crate::container::{write_atomic, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HSCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: DiTConfig,
    pub phase_vocab: usize,
    pub triplet_vocab: usize,
    pub seed: u64,
    pub step: u64,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata owned by the caller (stage name, codec settings).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A model together with its optimizer state and training position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Dit,
    pub adam: Adam,
    pub seed: u64,
    pub step: u64,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut blobs: Vec<&Array2<f64>> = Vec::new();
    for (name, a) in ckpt.model.params().iter() {
        entries.push(entry(name, TensorRole::Param, a));
        blobs.push(a);
    }
    for (store, role) in [(&ckpt.adam.m, TensorRole::AdamM), (&ckpt.adam.v, TensorRole::AdamV)] {
        for (name, a) in store.iter() {
            entries.push(entry(name, role, a));
            blobs.push(a);
        }
    }
    for (name, a) in ckpt.model.frozen() {
        entries.push(entry(name, TensorRole::Frozen, a));
        blobs.push(a);
    }
    let cfg = ckpt.model.config();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        phase_vocab: cfg.phase_vocab,
        triplet_vocab: cfg.triplet_vocab,
        seed: ckpt.seed,
        step: ckpt.step,
        adam_step: ckpt.adam.step,
        tensors: entries,
        extra: ckpt.extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(json.len() + 64);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for a in blobs {
        let blob = Tensor::F64(a.clone().into_dyn()).to_bytes();
        bytes.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&blob);
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    write_atomic(path, &bytes)
}

fn entry(name: &str, role: TensorRole, a: &Array2<f64>) -> TensorEntry {
    TensorEntry {
        name: name.to_string(),
        role,
        shape: [a.nrows(), a.ncols()],
    }
}

/// Reads only the JSON header (cheap; used for stage checks).
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = split_header(&bytes, path)?;
    Ok(header)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::integrity(path, "file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::integrity(path, "checksum mismatch"));
    }
    let (header, mut rest) = split_header(body, path)?;
    let mut params = ParamStore::new();
    let mut adam = Adam {
        step: header.adam_step,
        ..Adam::default()
    };
    let mut frozen = BTreeMap::new();
    for e in &header.tensors {
        if rest.len() < 8 {
            return Err(Error::integrity(path, format!("truncated before tensor {}", e.name)));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        rest = &rest[8..];
        if rest.len() < len {
            return Err(Error::integrity(path, format!("truncated tensor {}", e.name)));
        }
        let a = Tensor::from_bytes(&rest[..len], path)?
            .into_f64(path)?
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::integrity(path, format!("tensor {} is not a matrix", e.name)))?;
        rest = &rest[len..];
        if a.dim() != (e.shape[0], e.shape[1]) {
            return Err(Error::integrity(path, format!("tensor {} shape disagrees with header", e.name)));
        }
        match e.role {
            TensorRole::Param => params.insert(e.name.clone(), a),
            TensorRole::AdamM => adam.m.insert(e.name.clone(), a),
            TensorRole::AdamV => adam.v.insert(e.name.clone(), a),
            TensorRole::Frozen => {
                frozen.insert(e.name.clone(), a);
            }
        }
    }
    if !rest.is_empty() {
        return Err(Error::integrity(path, "trailing bytes after last tensor"));
    }
    let model = Dit::from_parts(header.config.clone(), params, frozen)?;
    Ok(Checkpoint {
        model,
        adam,
        seed: header.seed,
        step: header.step,
        extra: header.extra,
    })
}

fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointHeader, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::integrity(path, "not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8 + len;
    if bytes.len() < end {
        return Err(Error::integrity(path, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| Error::integrity(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::integrity(
            path,
            format!("unsupported checkpoint version {}", header.format_version),
        ));
    }
    Ok((header, &bytes[end..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AdamConfig, LabelProvider};

    fn sample() -> Checkpoint {
        let cfg = DiTConfig {
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            cond_dim: 8,
            label_dim: 4,
            provider: LabelProvider::PretrainedTable,
            ..DiTConfig::s2m(2)
        };
        let mut model = Dit::new(cfg, 5, None).unwrap();
        model.jitter_params(0.1, 3);
        let mut adam = Adam::new();
        let grads: BTreeMap<_, _> = model
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(|x| x * 0.5 + 0.1)))
            .collect();
        let mut params = model.params().clone();
        adam.update(&mut params, &grads, &AdamConfig::default());
        *model.params_mut() = params;
        Checkpoint {
            model,
            adam,
            seed: 42,
            step: 17,
            extra: serde_json::json!({"stage": "s2m"}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let header = read_checkpoint_header(&path).unwrap();
        assert_eq!(header.step, 17);
        assert_eq!(header.extra["stage"], "s2m");
        assert!(header.tensors.iter().any(|t| t.role == TensorRole::Frozen));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity { .. })));
        bytes.truncate(10);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity { .. })));
    }
}
