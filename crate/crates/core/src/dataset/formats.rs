//! Binary tensor (`FWTN`) and label-map (`FWLB`) files.
//!
//! Tensor file, little-endian:
//! `"FWTN" | u32 version=1 | u32 ndim | ndim x u32 dims | prod(dims) x f32`.
//!
//! Label file:
//! `"FWLB" | u32 version=1 | u32 H | u32 W | H*W x u8 class index`.

use std::fs;
use std::path::Path;

use super::LabelMap;
use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"FWTN";
pub const LABEL_MAGIC: [u8; 4] = *b"FWLB";
pub const FORMAT_VERSION: u32 = 1;

/// Little-endian cursor over a byte buffer that reports truncation precisely.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let raw =
            self.take(n.checked_mul(4).ok_or_else(|| {
                FormatError::Malformed(format!("payload of {n} values overflows"))
            })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn header(&mut self, magic: [u8; 4], version: u32) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                found,
            });
        }
        let v = self.u32()?;
        if v != version {
            return Err(FormatError::VersionMismatch {
                expected: version,
                found: v,
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} exceeds u32")))
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(t.rank())?.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    put_f32s(&mut out, t.data());
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    r.header(TENSOR_MAGIC, FORMAT_VERSION)?;
    let ndim = r.u32()? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Malformed(format!("dims {dims:?} overflow")))?;
    let data = r.f32s(numel)?;
    r.finish()?;
    Tensor::new(&dims, data).map_err(|e| FormatError::Malformed(e.to_string()).into())
}

pub fn encode_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + labels.data.len());
    out.extend_from_slice(&LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(labels.height)?.to_le_bytes());
    out.extend_from_slice(&dim_u32(labels.width)?.to_le_bytes());
    out.extend_from_slice(&labels.data);
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let mut r = Reader::new(bytes);
    r.header(LABEL_MAGIC, FORMAT_VERSION)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| FormatError::Malformed(format!("{h}x{w} overflows")))?;
    let data = r.take(n)?.to_vec();
    r.finish()?;
    Ok(LabelMap {
        height: h,
        width: w,
        data,
    })
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_labels(labels)?)?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_labels(&fs::read(path)?)
}
