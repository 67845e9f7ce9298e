//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CSCORECK"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   payload  f32 × product(dims)
//! ```

use std::path::Path;

use super::optim::ParamStore;
use super::tensor::{Real, Tensor};
use super::AutodiffError;

pub const MAGIC: &[u8; 8] = b"CSCORECK";
pub const VERSION: u32 = 1;

/// Encodes every entry of the store, trainable or not, as f32.
pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AutodiffError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, AutodiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, AutodiffError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, AutodiffError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| AutodiffError::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| AutodiffError::Checkpoint(format!("{name}: shape overflow")))?;
        let payload =
            r.take(numel.checked_mul(4).ok_or_else(|| AutodiffError::Checkpoint(format!("{name}: shape overflow")))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).expect("f32 converts"))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(AutodiffError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Overwrites the store's values from decoded tensors, matching by name and shape.
/// Every store entry must be present.
pub fn restore<T: Real>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<T>)>) -> Result<(), AutodiffError> {
    let mut by_name: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
    for p in store.iter_mut() {
        let t =
            by_name.remove(&p.name).ok_or_else(|| AutodiffError::Checkpoint(format!("missing tensor `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(AutodiffError::Checkpoint(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
        p.grad = None;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(AutodiffError::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<(), AutodiffError> {
    std::fs::write(path, encode(store)).map_err(|e| AutodiffError::Io(format!("{}: {e}", path.display())))
}

pub fn load<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>, AutodiffError> {
    let bytes = std::fs::read(path).map_err(|e| AutodiffError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
