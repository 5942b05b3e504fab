//! CATN tensor container.
//!
//! ```text
//! "CATN" | version u32 | rank u32 | dims u32 x rank | dtype u32 | f32 x prod(dims)
//! ```
//! All integers and floats are little-endian; dtype 0 is f32.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

use super::write_atomic;

pub const MAGIC: [u8; 4] = *b"CATN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

pub fn encode(tensor: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * tensor.ndim() + 4 * tensor.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &v in tensor.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or(Error::TruncatedPayload {
            expected: end,
            found: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ArrayD<f32>> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rank = r.u32()? as usize;
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let count: usize = dims.iter().product();
    let payload = &bytes[r.pos..];
    if payload.len() != count * 4 {
        return Err(Error::TruncatedPayload {
            expected: r.pos + count * 4,
            found: bytes.len(),
        });
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("payload length checked"))
}

pub fn write_tensor(path: &Path, tensor: &ArrayD<f32>) -> Result<()> {
    write_atomic(path, &encode(tensor))
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f32>> {
    decode(&std::fs::read(path)?)
}
