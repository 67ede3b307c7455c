//! Binary checkpoint: `KALACKPT`, u32 version, u64 header length, JSON header,
//! then every parameter value as little-endian f64 in store order.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{KalaModel, ModelConfig, Vocabularies};
use crate::corpus::sha256_hex;
use crate::error::{KalaError, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"KALACKPT";
pub const VERSION: u32 = 1;
pub const ENTITY_VOCAB_FILE: &str = "entity_vocab.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pinned_rows: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocab: Vocabularies,
    pub params: Vec<ParamMeta>,
    pub values_sha256: String,
    /// Free-form training provenance (epoch, validation score).
    #[serde(default)]
    pub info: serde_json::Value,
}

pub struct LoadedModel {
    pub model: KalaModel,
    pub store: ParamStore,
    pub vocab: Vocabularies,
    pub info: serde_json::Value,
}

fn value_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.num_scalars() * 8);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_bytes(model: &KalaModel, vocab: &Vocabularies, store: &ParamStore, info: serde_json::Value) -> Result<Vec<u8>> {
    let values = value_bytes(store);
    let header = CheckpointHeader {
        model: model.config.clone(),
        vocab: vocab.clone(),
        params: store
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                decay: p.decay,
                pinned_rows: p.pinned_rows.clone(),
            })
            .collect(),
        values_sha256: sha256_hex(&values),
        info,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&values);
    Ok(out)
}

/// Write the checkpoint and `entity_vocab.json` next to it.
pub fn save_checkpoint(
    path: &Path,
    model: &KalaModel,
    vocab: &Vocabularies,
    store: &ParamStore,
    info: serde_json::Value,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, vocab, store, info)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| KalaError::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(&bytes).map_err(|e| KalaError::io(format!("writing {}", tmp.display()), e))?;
    f.sync_all().map_err(|e| KalaError::io(format!("syncing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| KalaError::io(format!("renaming to {}", path.display()), e))?;
    let vocab_path = path.with_file_name(ENTITY_VOCAB_FILE);
    let json = serde_json::to_string_pretty(&vocab.entities)?;
    fs::write(&vocab_path, json).map_err(|e| KalaError::io(format!("writing {}", vocab_path.display()), e))?;
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<LoadedModel> {
    let bad = |m: &str| KalaError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(KalaError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..hend]).map_err(|e| KalaError::Checkpoint(format!("header: {e}")))?;
    let values = &bytes[hend..];
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if values.len() != expected * 8 {
        return Err(KalaError::Checkpoint(format!("expected {} value bytes, found {}", expected * 8, values.len())));
    }
    if sha256_hex(values) != header.values_sha256 {
        return Err(bad("parameter values do not match their checksum"));
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        let data = values[off..off + n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        off += n * 8;
        let id = store.add(&meta.name, Tensor::new(meta.shape.clone(), data)?, meta.decay);
        store.get_mut(id).pinned_rows = meta.pinned_rows.clone();
    }
    let model = KalaModel::bind(header.model, header.vocab.task, &store)?;
    Ok(LoadedModel { model, store, vocab: header.vocab, info: header.info })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let bytes = fs::read(path).map_err(|e| KalaError::io(format!("reading {}", path.display()), e))?;
    parse_checkpoint(&bytes)
}
