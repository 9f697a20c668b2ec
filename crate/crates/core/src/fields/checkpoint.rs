//! Binary model checkpoints.
//!
//! Layout (little-endian): `"CVRT"`, `u32` version, `u32` config length, the
//! resolved [`ModelConfig`] as UTF-8 JSON, `u32` tensor count, then for each
//! parameter in declared order a `u32` element count followed by `f32` data.

use std::path::Path;

use super::{ConvrtModel, FieldError, ModelConfig};
use crate::io::IoError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVRT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint(model: &ConvrtModel<f32>) -> Vec<u8> {
    let cfg = serde_json::to_vec(&model.config).expect("config serialises");
    let tensors = model.tensors();
    let n: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(16 + cfg.len() + 4 * (n + tensors.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    put_u32(&mut out, tensors.len());
    for t in tensors {
        put_u32(&mut out, t.numel());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!(
                "truncated checkpoint reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ConvrtModel<f32>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = r.u32("config length")?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| format!("bad checkpoint config: {e}"))?;
    let mut model = ConvrtModel::<f32>::init(&config).map_err(|e: FieldError| e.to_string())?;
    let count = r.u32("tensor count")?;
    let names = model.tensor_names();
    let mut tensors = model.tensors_mut();
    if count != tensors.len() {
        return Err(format!("checkpoint has {count} tensors, model layout needs {}", tensors.len()));
    }
    for (t, name) in tensors.iter_mut().zip(&names) {
        let n = r.u32("tensor length")?;
        if n != t.numel() {
            return Err(format!("{name}: checkpoint has {n} values, expected {}", t.numel()));
        }
        let raw = r.take(4 * n, name)?;
        for (dst, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ConvrtModel<f32>, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| IoError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ConvrtModel<f32>, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    read_checkpoint(&bytes).map_err(|e| IoError::Format(format!("{}: {e}", path.display())))
}
