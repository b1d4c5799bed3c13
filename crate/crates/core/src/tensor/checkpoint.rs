//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"GCVT"
//! version u32
//! count   u64                     number of records
//! record  name_len u32, name utf-8,
//!         rank u64, extents u64 × rank,
//!         payload f64 × product(extents)
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCVT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered name → tensor records.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_checkpoint<W: Write>(mut w: W, params: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params {
        let bytes = name.as_bytes();
        let len = u32::try_from(bytes.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Length(format!("checkpoint truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<NamedTensors> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut v = [0u8; 4];
    read_exact(&mut r, &mut v, "version")?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(&mut r, "record count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let mut l = [0u8; 4];
        read_exact(&mut r, &mut l, "name length")?;
        let mut name = vec![0u8; u32::from_le_bytes(l) as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let rank = read_u64(&mut r, "rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for `{name}`")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r, "extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        read_exact(&mut r, &mut payload, &name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(out)
}
