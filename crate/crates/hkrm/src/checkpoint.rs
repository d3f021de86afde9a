//! Versioned binary container for named float64 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"HKRMCKPT"
//! version      u32       currently 1
//! meta_len     u64       length of the UTF-8 JSON metadata blob
//! meta         meta_len  free-form JSON (model config, world spec, ...)
//! tensor_count u32
//! per tensor:
//!   name_len   u32
//!   name       name_len  UTF-8
//!   rows       u64
//!   cols       u64
//!   payload    rows*cols f64, row-major, little-endian
//! ```
//!
//! Tensors are written in sorted name order; the float payload round-trips
//! bitwise.

use crate::error::{Error, Result};
use crate::io_util::atomic_write;
use crate::matrix::DenseMatrix;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HKRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct TensorStore {
    pub meta: String,
    tensors: BTreeMap<String, DenseMatrix>,
}

impl TensorStore {
    pub fn new(meta: String) -> Self {
        TensorStore {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: DenseMatrix) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn insert_vec(&mut self, name: &str, v: &[f64]) {
        self.tensors
            .insert(name.to_string(), DenseMatrix::from_vec(1, v.len(), v.to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&DenseMatrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Domain(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.data().to_vec())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
            for &x in tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, origin };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad magic, not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::format(origin, "metadata is not valid UTF-8"))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(origin, "tensor name is not valid UTF-8"))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format(origin, "tensor shape overflows"))?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let chunk = r.take(8)?;
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            tensors.insert(name, DenseMatrix::from_vec(rows, cols, data));
        }
        Ok(TensorStore { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.origin,
                format!(
                    "truncated: needed {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
