//! `MTF1` tensor files: magic, `u32` rank, `u32` extents, row-major `f32`
//! payload, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{numel, Tensor};

pub const MAGIC: [u8; 4] = *b"MTF1";
pub const MAX_RANK: usize = 8;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(Error::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<usize> {
    let b = take(bytes, at, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

/// Decodes one record from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let mut at = 4;
    let rank = read_u32(bytes, &mut at)?;
    if rank > MAX_RANK {
        return Err(Error::RankTooLarge(rank));
    }
    let shape = (0..rank)
        .map(|_| read_u32(bytes, &mut at))
        .collect::<Result<Vec<_>>>()?;
    let n = numel(&shape);
    let payload = take(bytes, &mut at, 4 * n)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Tensor::new(shape, data)?, at))
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::invalid(
            "read_tensor_file",
            format!("{} trailing bytes", bytes.len() - used),
        ));
    }
    Ok(t)
}
