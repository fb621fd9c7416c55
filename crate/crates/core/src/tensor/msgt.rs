//! `MSGT` tensor dump: magic `MSGT`, little-endian `u32` rank, `rank` × `u32`
//! extents, then the payload as little-endian `f32`.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSGT";

fn malformed(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "MSGT tensor",
        msg: msg.into(),
    }
}

/// Writes one tensor and returns the number of bytes written.
pub fn write<T: Real>(out: &mut impl Write, t: &Tensor<T>) -> Result<usize> {
    out.write_all(MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| malformed(format!("extent {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(encoded_len(t.shape()))
}

pub fn encoded_len(shape: &[usize]) -> usize {
    8 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn read<T: Real>(input: &mut impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(malformed(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(input)? as usize;
    if rank == 0 || rank > 8 {
        return Err(malformed(format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; 4 * n];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
