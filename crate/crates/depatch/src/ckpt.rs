//! Versioned binary tensor container used for detector weights and training
//! checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   b"DPTF"
//! version  u16       currently 1
//! flags    u16       reserved, zero
//! count    u32       number of tensors
//! then per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   ndim     u8, dims u32 * ndim
//!   data     f64 * prod(dims)
//! ```
//!
//! Tensors keep insertion order; readers may index by name.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPTF";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name, dims, data });
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn by_name(&self) -> BTreeMap<&str, &Tensor> {
        self.tensors.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(t.dims.len() as u8);
            for &d in &t.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::parse(&bytes).map_err(|detail| Error::Format {
            what: "tensor checkpoint",
            path: path.to_path_buf(),
            detail,
        })
    }

    fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
            if *pos + n > bytes.len() {
                return Err(format!("truncated at byte {pos}", pos = *pos));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        take(&mut pos, 2)?; // flags
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| e.to_string())?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        if pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - pos));
        }
        Ok(TensorFile { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dptf");
        let mut f = TensorFile::new();
        f.push("conv1.w", vec![2, 3, 3, 3], (0..54).map(|i| i as f64 * 0.5).collect());
        f.push("conv1.b", vec![2], vec![-1.0, 2.0]);
        f.save(&path).unwrap();
        let g = TensorFile::load(&path).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.get("conv1.b").unwrap().data, vec![-1.0, 2.0]);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dptf");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(TensorFile::load(&path).is_err());
    }
}
