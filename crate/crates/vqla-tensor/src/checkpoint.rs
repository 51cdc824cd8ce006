//! Binary checkpoint container.
//!
//! Layout: magic `SLVM`, version `u32` LE, entry count `u64` LE, then per
//! entry: `u32` name length + UTF-8 name, `u8` dtype code (0 = f32, 1 = f64),
//! `u8` rank, rank x `u64` dims, raw little-endian values. Entries are written
//! in sorted path order so identical stores serialize to identical bytes.

use std::io::Read;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::optim::ParamStore;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLVM";
pub const VERSION: u32 = 1;

pub fn to_bytes<E: Scalar>(store: &ParamStore<E>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (path, tensor) in store.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(E::DTYPE.code());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data().iter() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<E: Scalar>(path: impl AsRef<Path>, store: &ParamStore<E>) -> Result<()> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Format(format!(
                "truncated file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn from_bytes<E: Scalar>(bytes: &[u8]) -> Result<ParamStore<E>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(TensorError::Format("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = cur.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| TensorError::Format("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = Dtype::from_code(cur.u8()?)
            .ok_or_else(|| TensorError::Format(format!("unknown dtype code in `{name}`")))?;
        if dtype != E::DTYPE {
            return Err(TensorError::DtypeMismatch {
                name,
                found: dtype,
                expected: E::DTYPE,
            });
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = E::DTYPE.size_bytes();
        let raw = cur.take(numel * width)?;
        let data: Vec<E> = raw.chunks_exact(width).map(E::read_le).collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| TensorError::Format(format!("entry `{name}`: {e}")))?;
        store.insert(name, tensor)?;
    }
    if cur.pos != bytes.len() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after last entry",
            bytes.len() - cur.pos
        )));
    }
    Ok(store)
}

pub fn load<E: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<E>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Copies checkpoint values into an existing store in place. Every file entry
/// must name a known parameter of matching shape; store parameters absent
/// from the file keep their values (partial loads are how adapter-only
/// checkpoints apply).
pub fn load_into<E: Scalar>(path: impl AsRef<Path>, store: &ParamStore<E>) -> Result<usize> {
    let loaded = load::<E>(path)?;
    for (name, tensor) in loaded.iter() {
        let target = store.get(name).ok_or_else(|| {
            TensorError::Format(format!("checkpoint entry `{name}` is not a model parameter"))
        })?;
        if target.shape() != tensor.shape() {
            return Err(TensorError::Format(format!(
                "entry `{name}` has shape {:?}, model expects {:?}",
                tensor.shape(),
                target.shape()
            )));
        }
        target.set_data(&tensor.data());
    }
    Ok(loaded.len())
}
