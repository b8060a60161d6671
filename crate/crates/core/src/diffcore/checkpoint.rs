//! Binary checkpoint: the magic `FLOWSCKPT1`, a little-endian `u32` version and
//! array count, then per array: `u32` name length, UTF-8 name, `u32` rank,
//! `u64` dimensions, and the values as little-endian `f64`.

use std::io::{Read, Write};

use super::param::ParamArray;
use crate::error::{FlowsError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"FLOWSCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> FlowsError {
    FlowsError::io("checkpoint", e)
}

pub fn write_checkpoint<W: Write>(mut w: W, arrays: &[ParamArray]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes()).map_err(io_err)?;
    for a in arrays {
        let name = a.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&(a.shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in &a.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in &a.values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            FlowsError::Checkpoint(format!("truncated at byte {} ({e})", self.offset))
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<ParamArray>> {
    let mut r = Reader { inner: r, offset: 0 };
    if r.bytes(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(FlowsError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FlowsError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?)
            .map_err(|_| FlowsError::Checkpoint(format!("non-UTF-8 name before byte {}", r.offset)))?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(FlowsError::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(ParamArray::new(name, shape, values)?);
    }
    Ok(arrays)
}
