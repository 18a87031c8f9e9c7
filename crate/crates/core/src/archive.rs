//! Portable tensor archive used for network weights and precomputed embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FQTA" | version u32 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | dtype u8 (1 = f32) | rank u8 | dims u32 * rank | payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{FqaError, Result};

pub const MAGIC: &[u8; 4] = b"FQTA";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FqaError::Archive(format!(
                "tensor {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub tensors: Vec<Tensor>,
}

impl TensorArchive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Insert or replace by name, keeping first-insertion order.
    pub fn put(&mut self, tensor: Tensor) {
        match self.tensors.iter_mut().find(|t| t.name == tensor.name) {
            Some(slot) => *slot = tensor,
            None => self.tensors.push(tensor),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| FqaError::Archive(format!("tensor name too long: {}", t.name)))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| FqaError::Archive(format!("tensor {} has too many dimensions", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| FqaError::Archive(format!("tensor {} dimension overflow", t.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "header")?;
        if magic != MAGIC {
            return Err(FqaError::Archive("bad magic bytes, not a tensor archive".into()));
        }
        let version = r.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(FqaError::Archive(format!(
                "unsupported archive version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = r.u32("header")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let ctx = format!("tensor #{i}");
            let name_len = r.u16(&ctx)? as usize;
            let name = String::from_utf8(r.take(name_len, &ctx)?.to_vec())
                .map_err(|_| FqaError::Archive(format!("{ctx}: name is not UTF-8")))?;
            let dtype = r.u8(&name)?;
            if dtype != DTYPE_F32 {
                return Err(FqaError::Archive(format!("tensor {name}: unsupported dtype tag {dtype}")));
            }
            let rank = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| FqaError::Archive(format!("tensor {name}: size overflow")))?, &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(FqaError::Archive(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
        }
        Ok(TensorArchive { tensors })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| FqaError::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FqaError::io(path, e))?;
        TensorArchive::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            FqaError::Archive(format!("archive truncated while reading {what}"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
