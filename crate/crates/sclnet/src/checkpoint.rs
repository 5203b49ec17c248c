//! Single-file container of named arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   b"SCLNCKPT"
//! index_len  u64       byte length of the JSON index
//! index      JSON      {"version": 1, "metadata": {..}, "arrays": [entry, ..]}
//! blob       bytes     array payloads, concatenated
//! ```
//!
//! Each entry is `{"name", "kind", "dtype", "shape", "offset", "nbytes"}`.
//! `offset` is relative to the start of the blob, `dtype` is `"f32"` or
//! `"f64"`, `kind` is `"weight"` or `"buffer"`, and payloads are row-major
//! little-endian IEEE floats. `metadata` holds the effective run config the
//! parameters were trained with. See `docs/checkpoint.md` for a worked
//! example.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sclnet_core::params::{ModelParams, ParamKind};
use sclnet_core::{Real, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"SCLNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub kind: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub version: u32,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

fn kind_tag(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Weight => "weight",
        ParamKind::Buffer => "buffer",
    }
}

/// Serialises `params` with `metadata` into the container format.
pub fn to_bytes(params: &ModelParams<f32>, metadata: serde_json::Value) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut arrays = Vec::with_capacity(params.len());
    for e in params.entries() {
        let offset = blob.len() as u64;
        f32::to_le_bytes_vec(e.value.data(), &mut blob);
        arrays.push(ArrayEntry {
            name: e.name.clone(),
            kind: kind_tag(e.kind).into(),
            dtype: "f32".into(),
            shape: e.value.shape().to_vec(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let index = serde_json::to_vec(&Index { version: VERSION, metadata, arrays }).expect("index serialises");
    let mut out = Vec::with_capacity(16 + index.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&blob);
    out
}

pub fn save(path: &Path, params: &ModelParams<f32>, metadata: serde_json::Value) -> CliResult<()> {
    let bytes = to_bytes(params, metadata);
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Runtime(format!("malformed checkpoint: {}", msg.into()))
}

/// Parses a container; `f64` payloads are narrowed to `f32`.
pub fn from_bytes(bytes: &[u8]) -> CliResult<(ModelParams<f32>, serde_json::Value)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("index overruns file"))?;
    let index: Index = serde_json::from_slice(&bytes[16..blob_start]).map_err(|e| bad(format!("index: {e}")))?;
    if index.version != VERSION {
        return Err(bad(format!("unsupported version {}", index.version)));
    }
    let blob = &bytes[blob_start..];
    let mut params = ModelParams::new();
    for a in &index.arrays {
        let lo = a.offset as usize;
        let hi = lo.checked_add(a.nbytes as usize).filter(|&h| h <= blob.len()).ok_or_else(|| bad(format!("array `{}` overruns blob", a.name)))?;
        let raw = &blob[lo..hi];
        let data: Vec<f32> = match a.dtype.as_str() {
            "f32" => f32::from_le_bytes_slice(raw),
            "f64" => f64::from_le_bytes_slice(raw).map(|v| v.into_iter().map(|x| x as f32).collect()),
            d => return Err(bad(format!("array `{}` has unknown dtype `{d}`", a.name))),
        }
        .ok_or_else(|| bad(format!("array `{}` has a truncated payload", a.name)))?;
        let kind = match a.kind.as_str() {
            "weight" => ParamKind::Weight,
            "buffer" => ParamKind::Buffer,
            k => return Err(bad(format!("array `{}` has unknown kind `{k}`", a.name))),
        };
        let t = Tensor::from_vec(&a.shape, data).map_err(|e| bad(format!("array `{}`: {e}", a.name)))?;
        params.insert(&a.name, kind, t).map_err(|e| bad(e.to_string()))?;
    }
    Ok((params, index.metadata))
}

pub fn load(path: &Path) -> CliResult<(ModelParams<f32>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut p = ModelParams::new();
        p.insert("a.weight", ParamKind::Weight, Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-8, f32::MAX]).unwrap())
            .unwrap();
        p.insert("a.running_mean", ParamKind::Buffer, Tensor::from_vec(&[1], vec![0.25]).unwrap()).unwrap();
        let meta = serde_json::json!({"channels": 32});
        let (q, m) = from_bytes(&to_bytes(&p, meta.clone())).unwrap();
        assert_eq!(q, p);
        assert_eq!(m, meta);
    }

    #[test]
    fn corruption_is_reported() {
        let mut p = ModelParams::new();
        p.insert("w", ParamKind::Weight, Tensor::from_vec(&[4], vec![1.0; 4]).unwrap()).unwrap();
        let bytes = to_bytes(&p, serde_json::Value::Null);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"NOTACKPT\0\0\0\0\0\0\0\0").is_err());
    }
}
