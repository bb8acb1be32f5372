//! `DPKF` feature archives: named dense tensors in f32 or f64.
//!
//! Layout (little-endian): magic `DPKF`, `u32` version, `u32` tensor count,
//! then per tensor a `u32` name length, UTF-8 name, `u8` dtype tag
//! (0 = f32, 1 = f64), `u32` rank, `u64` dims and the raw payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DpkError, Result};

pub const MAGIC: &[u8; 4] = b"DPKF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(DpkError::Format(format!(
                "tensor `{name}`: dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(ArchiveTensor { name, dims, data })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureArchive {
    pub tensors: Vec<ArchiveTensor>,
}

impl FeatureArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: ArchiveTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.data.tag()])?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::parse(&bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read(path)?)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(DpkError::Format("not a DPKF archive (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(DpkError::Format(format!("unsupported DPKF version {version}")));
        }
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = c.u32()? as usize;
            let name = String::from_utf8(c.take(len)?.to_vec())
                .map_err(|_| DpkError::Format("tensor name is not UTF-8".into()))?;
            let tag = c.take(1)?[0];
            let rank = c.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(usize::try_from(c.u64()?).map_err(|_| DpkError::Format("dimension overflows".into()))?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| DpkError::Format(format!("tensor `{name}` is too large")))?;
            let data = match tag {
                0 => TensorData::F32(
                    c.take(n.checked_mul(4).ok_or_else(|| DpkError::Format("payload overflows".into()))?)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F64(
                    c.take(n.checked_mul(8).ok_or_else(|| DpkError::Format("payload overflows".into()))?)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                t => return Err(DpkError::Format(format!("tensor `{name}` has unknown dtype tag {t}"))),
            };
            tensors.push(ArchiveTensor { name, dims, data });
        }
        if c.pos != bytes.len() {
            return Err(DpkError::Format(format!("{} trailing bytes after last tensor", bytes.len() - c.pos)));
        }
        Ok(FeatureArchive { tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DpkError::Format(format!("archive truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureArchive {
        let mut a = FeatureArchive::new();
        a.push(ArchiveTensor::new("x", vec![2, 3], TensorData::F32(vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e30, -7.25])).unwrap());
        a.push(ArchiveTensor::new("y", vec![2], TensorData::F64(vec![std::f64::consts::PI, -1e-300])).unwrap());
        a
    }

    #[test]
    fn round_trip_bit_exact() {
        let a = sample();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = FeatureArchive::parse(&buf).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_truncation_at_every_length() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        for n in 0..buf.len() {
            assert!(FeatureArchive::parse(&buf[..n]).is_err(), "prefix of {n} bytes accepted");
        }
    }

    #[test]
    fn rejects_inconsistent_dims() {
        assert!(ArchiveTensor::new("z", vec![2, 2], TensorData::F32(vec![0.0; 3])).is_err());
    }
}
