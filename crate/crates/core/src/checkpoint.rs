//! Binary checkpoints.
//!
//! Layout: the magic bytes `CDETRCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then the raw
//! little-endian tensor data in header order.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use celldetr_tensor::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::CellDetr;

pub const MAGIC: &[u8; 8] = b"CDETRCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Training context stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub val_cell_jaccard: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    trainable: bool,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &CellDetr<T>, meta: &CheckpointMeta) -> Result<()> {
    let named = model.store.named_tensors();
    let header = Header {
        dtype: T::DTYPE.name().to_string(),
        model: model.config.clone(),
        meta: meta.clone(),
        tensors: named
            .iter()
            .map(|(name, trainable, t)| Entry {
                name: name.clone(),
                trainable: *trainable,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(24 + json.len() + model.num_parameters() * std::mem::size_of::<T>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, t) in &named {
        buf.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn decode<T: Scalar>(dtype: DType, bytes: &[u8]) -> Vec<T> {
    match dtype {
        DType::F32 => f32::from_le_slice(bytes).into_iter().map(|v| T::from_f64_lossy(v as f64)).collect(),
        DType::F64 => f64::from_le_slice(bytes).into_iter().map(T::from_f64_lossy).collect(),
    }
}

/// Loads a checkpoint, converting the stored precision to `T` if needed.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CellDetr<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(format!("bad header: {e}")))?;
    let dtype = DType::from_name(&header.dtype).ok_or_else(|| bad(format!("unknown dtype {}", header.dtype)))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut model = CellDetr::<T>::new(&header.model, 0)?;
    let expected: HashSet<String> = model.store.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    let mut seen = HashSet::new();
    let mut pos = body;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let end = pos + len * width;
        if end > bytes.len() {
            return Err(bad(format!("truncated data for '{}'", entry.name)));
        }
        let t = Tensor::from_vec(&entry.shape, decode(dtype, &bytes[pos..end]))?;
        model.store.load_named(&entry.name, t)?;
        seen.insert(entry.name.clone());
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data".into()));
    }
    if let Some(missing) = expected.difference(&seen).next() {
        return Err(bad(format!("tensor '{missing}' is missing")));
    }
    Ok((model, header.meta))
}
