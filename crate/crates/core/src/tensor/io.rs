//! The `DGT1` binary tensor format: magic `DGT1`, one dtype byte
//! (0 = f32, 1 = f64), one rank byte, `rank` little-endian u32 extents,
//! then the row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 4] = b"DGT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    /// The dtype matching the compiled scalar.
    pub fn native() -> Self {
        if cfg!(feature = "f32") {
            DType::F32
        } else {
            DType::F64
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "DGT1 tensor",
        reason: reason.into(),
    }
}

// The casts are no-ops in one precision or the other.
#[allow(clippy::unnecessary_cast)]
pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(bad("rank exceeds 255"));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + dtype.width() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| bad("extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f64).to_le_bytes())),
    }
    Ok(out)
}

/// Decodes a tensor and reports the dtype it was stored with.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType)> {
    let mut r = bytes;
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let dtype = match head[4] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(bad(format!("unknown dtype byte {other}"))),
    };
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated extents"))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != n * dtype.width() {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            r.len(),
            n * dtype.width()
        )));
    }
    let data: Vec<Real> = match dtype {
        DType::F32 => r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
        DType::F64 => r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode(t, dtype)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Tensor, DType)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
