//! Self-describing container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "STDNCKPT"  u32 version  u32 manifest_len  manifest (JSON)
//! repeated: u32 name_len  name  u8 dtype  u32 rank  u64 dims[rank]  data
//! ```
//!
//! The manifest carries the network configuration, the tensor count and free
//! string metadata. Batch-norm statistics are stored as `<layer>.running_mean`
//! and `<layer>.running_var`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::network::{ModelState, NetworkConfig};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STDNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    tensors: usize,
    meta: BTreeMap<String, String>,
}

const MEAN: &str = ".running_mean";
const VAR: &str = ".running_var";

fn push_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[S]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(S::DTYPE.code());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

pub fn encode<S: Scalar>(state: &ModelState<S>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let header = Header {
        config: state.config.clone(),
        tensors: state.params.len() + 2 * state.running.len(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in &state.params {
        push_tensor(&mut out, name, t.shape(), t.data());
    }
    for (name, r) in &state.running {
        push_tensor(&mut out, &format!("{name}{MEAN}"), &[r.mean.len()], &r.mean);
        push_tensor(&mut out, &format!("{name}{VAR}"), &[r.var.len()], &r.var);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_values<S: Scalar>(r: &mut Reader, dtype: DType, n: usize) -> Result<Vec<S>> {
    let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
    let conv = |v: f64| S::from_f64(v).unwrap();
    Ok(match dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| conv(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| conv(f64::read_le(c))).collect(),
    })
}

/// Decodes a container, converting stored values to `S`.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(ModelState<S>, BTreeMap<String, String>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut params = BTreeMap::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for _ in 0..header.tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let data = read_values::<S>(&mut r, dtype, numel)?;
        if let Some(layer) = name.strip_suffix(MEAN) {
            means.insert(layer.to_string(), data);
        } else if let Some(layer) = name.strip_suffix(VAR) {
            vars.insert(layer.to_string(), data);
        } else {
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut running = BTreeMap::new();
    for (layer, mean) in means {
        let var = vars
            .remove(&layer)
            .ok_or_else(|| Error::Checkpoint(format!("{layer}: variance missing")))?;
        running.insert(layer, RunningStats { mean, var });
    }
    let state = ModelState {
        config: header.config,
        params,
        running,
    };
    state.validate()?;
    Ok((state, header.meta))
}

pub fn save<S: Scalar>(path: impl AsRef<Path>, state: &ModelState<S>, meta: &BTreeMap<String, String>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(state, meta)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<(ModelState<S>, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
