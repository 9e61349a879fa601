//! Flat binary parameter checkpoints (`SKCK`).

use std::path::Path;

use skypart_tensor::{ParamStore, Tensor};

use crate::error::{Result, SkyError};

const MAGIC: &[u8; 4] = b"SKCK";

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SkyError::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Named tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(SkyError::format("checkpoint", "missing SKCK header"));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| SkyError::format("checkpoint", "name is not UTF-8"))?;
        let rank = c.u32()?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()?);
        }
        let n: usize = dims.iter().product();
        let data = c.take(4 * n)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        let t = Tensor::new(dims, data).map_err(|e| SkyError::format("checkpoint", e.to_string()))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(SkyError::format("checkpoint", "trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_store(store))?;
    Ok(())
}

/// Overwrites every tensor of `store` from the file; names and shapes must match exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors = decode(&std::fs::read(path)?)?;
    if tensors.len() != store.len() {
        return Err(SkyError::format("checkpoint", format!("{} tensors, model has {}", tensors.len(), store.len())));
    }
    for (name, t) in tensors {
        let id = store.id(&name).ok_or_else(|| SkyError::format("checkpoint", format!("unknown tensor `{name}`")))?;
        store.set_value(id, t).map_err(|e| SkyError::format("checkpoint", format!("`{name}`: {e}")))?;
    }
    Ok(())
}
