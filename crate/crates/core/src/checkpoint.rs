//! Versioned parameter checkpoints.
//!
//! Layout (little-endian): magic `DPKC`, `u32` version, `u64` config hash,
//! `u64` seed, `u32` entry count, then per entry a `u32` name length, UTF-8
//! name, `u32` rank, `u64` dims and an f32 payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dpk_tensor::VarStore;

use crate::error::{DpkError, Result};

pub const MAGIC: &[u8; 4] = b"DPKC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub seed: u64,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(vs: &VarStore, config_hash: u64, seed: u64) -> Self {
        let params = vs
            .named_values()
            .into_iter()
            .map(|(name, shape, data)| (name, (shape, data)))
            .collect();
        Checkpoint {
            config_hash,
            seed,
            params,
        }
    }

    /// Copies every parameter of `vs` from the checkpoint.
    pub fn restore(&self, vs: &VarStore) -> Result<()> {
        Ok(vs.load(&self.params)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| DpkError::Format(format!("checkpoint truncated at byte {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(DpkError::Format("not a DPKC checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(DpkError::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| DpkError::Format("parameter name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| DpkError::Format(format!("parameter `{name}` is too large")))?;
            let data = take(n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            params.insert(name, (shape, data));
        }
        if pos != bytes.len() {
            return Err(DpkError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config_hash,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
