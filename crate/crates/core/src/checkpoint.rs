//! `FWCK` checkpoint files.
//!
//! Little-endian layout: `"FWCK" | u32 version | u32 entries`, then per entry
//! `u16 name length | UTF-8 name | u32 ndim | ndim x u32 dims | f32 payload`.
//! Entries are sorted by name. The step counter is stored as the entry
//! `meta.step`, a `[4]` tensor of 16-bit limbs (least significant first),
//! each exactly representable in `f32`.

use std::fs;
use std::path::Path;

use crate::dataset::{put_f32s, Reader};
use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;
use crate::params::ParamSet;

pub const MAGIC: [u8; 4] = *b"FWCK";
pub const VERSION: u32 = 1;
pub const STUDENT_PREFIX: &str = "student.";
pub const TEACHER_PREFIX: &str = "teacher.";
pub const STEP_ENTRY: &str = "meta.step";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub step: u64,
}

fn step_tensor(step: u64) -> Tensor {
    Tensor::from_fn(&[4], |i| ((step >> (16 * i)) & 0xFFFF) as f64)
}

fn step_from_tensor(t: &Tensor) -> Result<u64> {
    t.expect_shape(&[4])?;
    let mut step = 0u64;
    for (i, &v) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&v) || v.fract() != 0.0 {
            return Err(FormatError::Malformed(format!("bad step limb {v}")).into());
        }
        step |= (v as u64) << (16 * i);
    }
    Ok(step)
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("{what} {n} exceeds u32")))
}

/// Serialises every buffer as `f32`. Values that are not exactly
/// representable in `f32` are rounded, so only snapped parameter sets
/// roundtrip bit-exactly.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    let step = step_tensor(ck.step);
    entries.push((STEP_ENTRY.to_string(), &step));
    for (name, t) in ck.student.iter() {
        entries.push((format!("{STUDENT_PREFIX}{name}"), t));
    }
    for (name, t) in ck.teacher.iter() {
        entries.push((format!("{TEACHER_PREFIX}{name}"), t));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(entries.len(), "entry count")?.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Data(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

/// Loaded buffers are all marked non-trainable; callers re-apply the
/// trainable split that matches their mode.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let count = r.u32()?;
    let mut student = ParamSet::new();
    let mut teacher = ParamSet::new();
    let mut step = None;
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed(format!("{name}: dimensions overflow")))?;
        let data = r.f32s(numel)?;
        let t =
            Tensor::new(&dims, data).map_err(|e| FormatError::Malformed(format!("{name}: {e}")))?;
        let (set, key) = if let Some(k) = name.strip_prefix(STUDENT_PREFIX) {
            (&mut student, k)
        } else if let Some(k) = name.strip_prefix(TEACHER_PREFIX) {
            (&mut teacher, k)
        } else if name == STEP_ENTRY {
            step = Some(step_from_tensor(&t)?);
            continue;
        } else {
            return Err(FormatError::Malformed(format!("unknown entry {name}")).into());
        };
        if set.contains(key) {
            return Err(FormatError::Malformed(format!("duplicate entry {name}")).into());
        }
        set.insert(key, t);
    }
    r.finish()?;
    let step = step.ok_or_else(|| FormatError::Malformed("missing step counter".into()))?;
    Ok(Checkpoint {
        student,
        teacher,
        step,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
