//! Flat binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  4 bytes  "MXT1"
//! dtype  u8       1 = F16, 2 = F32
//! rank   u8
//! dims   rank x u64
//! data   product(dims) elements: F16 as u16 bit patterns, F32 as IEEE single
//! ```

use std::io::{Read, Write};

use super::{DType, Storage, Tensor};
use crate::binary16::Half;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"MXT1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[t.dtype().code(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * t.dtype().size_of());
    match t.storage() {
        Storage::F16(v) => v.iter().for_each(|h| buf.extend_from_slice(&h.to_bits().to_le_bytes())),
        Storage::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format { what: "tensor container", detail: detail.into() }
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if head[..4] != TENSOR_MAGIC {
        return Err(malformed(format!("bad magic {:02x?}, expected {:02x?}", &head[..4], TENSOR_MAGIC)));
    }
    let dtype = DType::from_code(head[4]).ok_or_else(|| malformed(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)?;
        shape.push(usize::try_from(u64::from_le_bytes(d)).map_err(|_| malformed("dimension overflows usize"))?);
    }
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| malformed("element count overflow"))?;
    let mut buf = vec![0u8; n * dtype.size_of()];
    r.read_exact(&mut buf)?;
    let storage = match dtype {
        DType::F16 => Storage::F16(
            buf.chunks_exact(2).map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]]))).collect(),
        ),
        DType::F32 => Storage::F32(
            buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        ),
    };
    Tensor::new(&shape, storage).map_err(|e| malformed(e.to_string()))
}
