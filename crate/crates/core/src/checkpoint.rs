//! Model checkpoints.
//!
//! A checkpoint is a magic line, one line of JSON index, then the
//! parameters as concatenated F32R blobs:
//!
//! ```text
//! CORRCOUNT-CKPT 1\n
//! {"version":1,"model":{...},"params":[{"name":..,"offset":..,"length":..},...]}\n
//! F32R\n...F32R\n...
//! ```
//!
//! Offsets are relative to the first byte after the index line. Values are
//! stored as `f32`, so a loaded model carries `f32`-rounded parameters;
//! saving it again reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CountingModel, ModelConfig};
use crate::params::ParamStore;
use crate::raster;

pub const MAGIC: &str = "CORRCOUNT-CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    offset: usize,
    length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    version: u32,
    model: ModelConfig,
    params: Vec<BlobEntry>,
}

pub fn encode(model: &CountingModel) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut entries = Vec::new();
    for (name, value) in model.params().iter() {
        let bytes = raster::encode_f32r(value)?;
        entries.push(BlobEntry {
            name: name.to_string(),
            offset: blobs.len(),
            length: bytes.len(),
        });
        blobs.extend_from_slice(&bytes);
    }
    let index = Index {
        version: VERSION,
        model: model.config().clone(),
        params: entries,
    };
    let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(&index)?);
    out.push(b'\n');
    out.extend(blobs);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<CountingModel> {
    let load = |offset: usize, msg: String| Error::Load { offset, msg };
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| load(0, "missing checkpoint header".into()))?;
    let header = std::str::from_utf8(&bytes[..first_nl]).unwrap_or("");
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| load(0, "not a checkpoint file".into()))?;
    if version != VERSION.to_string() {
        return Err(load(0, format!("unsupported checkpoint version {version:?}")));
    }
    let index_start = first_nl + 1;
    let index_len = bytes[index_start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| load(index_start, "unterminated index line".into()))?;
    let index: Index = serde_json::from_slice(&bytes[index_start..index_start + index_len])
        .map_err(|e| load(index_start, format!("bad index: {e}")))?;
    let blob_start = index_start + index_len + 1;
    let blobs = &bytes[blob_start..];

    let mut store = ParamStore::new();
    for entry in &index.params {
        let end = entry
            .offset
            .checked_add(entry.length)
            .filter(|&e| e <= blobs.len())
            .ok_or_else(|| load(blob_start + entry.offset, format!("blob {} runs past end of file", entry.name)))?;
        let tensor = raster::decode_f32r(&blobs[entry.offset..end]).map_err(|e| match e {
            Error::Load { offset, msg } => load(blob_start + entry.offset + offset, format!("{}: {msg}", entry.name)),
            other => other,
        })?;
        if store.find(&entry.name).is_some() {
            return Err(load(index_start, format!("duplicate parameter {}", entry.name)));
        }
        store.add(entry.name.clone(), tensor);
    }
    CountingModel::from_params(index.model, store)
}

pub fn save(model: &CountingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<CountingModel> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn model() -> CountingModel {
        CountingModel::new(ModelConfig {
            backbone: BackboneConfig {
                stage_channels: vec![2, 2, 2],
                image_size: 16,
                feature_size: 8,
                ..BackboneConfig::default()
            },
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_stable() {
        let bytes = encode(&model()).unwrap();
        assert!(bytes.starts_with(b"CORRCOUNT-CKPT 1\n{"));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config(), model().config());
        assert_eq!(encode(&back).unwrap(), bytes);
        for (a, b) in back.params().values().iter().zip(model().params().values()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode(&model()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 2]), Err(Error::Load { .. })));
        assert!(matches!(decode(b"hello\n"), Err(Error::Load { offset: 0, .. })));
        let mut v2 = bytes.clone();
        v2[15] = b'2';
        assert!(matches!(decode(&v2), Err(Error::Load { .. })));
    }
}
