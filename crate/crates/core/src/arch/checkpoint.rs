//! Binary checkpoint format.
//!
//! ```text
//! "TBFM" | u16 version | u32 json_len | json metadata
//! u32 n_tensors
//! per tensor: u16 name_len | name | u8 ndim | u32 dims... | f32 data (LE, row-major)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::ModelConfig;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TBFM";
pub const VERSION: u16 = 1;

/// Metadata block of a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub seed: u64,
    pub epoch: usize,
    /// Free-form extras (training state, metrics).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(meta: &serde_json::Value, tensors: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| bad("metadata too large"))?.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&u16::try_from(nb.len()).map_err(|_| bad("tensor name too long"))?.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub type TensorList = Vec<(String, Tensor<f32>)>;

pub fn decode_checkpoint(buf: &[u8]) -> Result<(serde_json::Value, TensorList)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(len)?)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let nl = r.u16()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok((meta, tensors))
}

pub fn write_checkpoint(path: &Path, meta: &serde_json::Value, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let bytes = encode_checkpoint(meta, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so an interrupted run never leaves half a file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, TensorList)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl<T: Real> Model<T> {
    /// Parameters as `f32` tensors in registration order.
    pub fn tensors_f32(&self) -> Vec<(String, Tensor<f32>)> {
        self.params().iter().map(|p| (p.name.clone(), p.value.cast())).collect()
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let tensors = self.tensors_f32();
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_checkpoint(path, &serde_json::to_value(meta)?, &refs)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, tensors) = read_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("{}: metadata: {e}", path.display())))?;
        let tensors = tensors.into_iter().map(|(n, t)| (n, t.cast())).collect();
        let model = Model::from_params(meta.config.clone(), tensors)?;
        Ok((model, meta))
    }
}
