use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FRTN";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// `FRTN` record: magic, version (u32), dtype (u8), rank (u32), dims (u64
/// each), row-major payload, all little-endian.
///
/// With `F32` every value must be exactly representable, so reading back
/// is bitwise; images are already rounded through f32.
pub fn encode_tensor(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + 8 * t.rank() + dtype.size() * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => {
            for (i, &v) in t.data().iter().enumerate() {
                let f = v as f32;
                if f as f64 != v && !v.is_nan() {
                    return Err(Error::contract(format!("value {v} at index {i} is not exactly representable as f32")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::format(format!("tensor file truncated in field '{field}'"))),
        }
    }
}

/// Decode one record from the front of `bytes`; returns the tensor and the
/// number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("tensor file: bad field 'magic'"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(format!("tensor file: unsupported field 'version' = {version}")));
    }
    let dtype = match r.take(1, "dtype")?[0] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(Error::format(format!("tensor file: bad field 'dtype' = {c}"))),
    };
    let rank = u32::from_le_bytes(r.take(4, "rank")?.try_into().expect("4 bytes")) as usize;
    if rank > 16 {
        return Err(Error::format(format!("tensor file: bad field 'rank' = {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(r.take(8, "dims")?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::format("tensor file: bad field 'dims'"))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format("tensor file: bad field 'dims' (overflow)"))?;
    let bytes_needed = n
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::format("tensor file: bad field 'dims' (overflow)"))?;
    let payload = r.take(bytes_needed, "payload")?;
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?;
    Ok((t, r.pos))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    write_atomic(path, &encode_tensor(t, dtype)?)
}

/// Read a file holding exactly one record.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::format(format!(
            "tensor file {}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}
