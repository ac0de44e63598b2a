//! Precomputed-embedding file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   "VALMEMB"          7 bytes
//! version u32                currently 1
//! dim     u32
//! count   u64
//! count × { id u64, dim × f32 }
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::EncoderError;
use crate::io::{atomic_write, ByteReader, PutLe};

pub const MAGIC: &[u8; 7] = b"VALMEMB";
pub const VERSION: u32 = 1;

/// Id-addressed table of fixed-dimension vectors, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    lookup: HashMap<u64, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn from_records(
        dim: usize,
        records: impl IntoIterator<Item = (u64, Vec<f32>)>,
    ) -> Result<Self, EncoderError> {
        let mut table = Self::new(dim);
        for (id, v) in records {
            table.push(id, &v)?;
        }
        Ok(table)
    }

    pub fn push(&mut self, id: u64, v: &[f32]) -> Result<(), EncoderError> {
        if v.len() != self.dim {
            return Err(EncoderError::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if self.lookup.insert(id, self.ids.len()).is_some() {
            return Err(EncoderError::DuplicateId(id));
        }
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.lookup
            .get(&id)
            .map(|&row| &self.data[row * self.dim..(row + 1) * self.dim])
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(row, &id)| (id, self.row(row)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(23 + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.put_u32(VERSION);
        out.put_u32(self.dim as u32);
        out.put_u64(self.len() as u64);
        for (id, v) in self.iter() {
            out.put_u64(id);
            out.put_f32s(v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let corrupt = |why: &str| EncoderError::CorruptEmbeddings(why.to_string());
        let mut r = ByteReader::new(bytes);
        if r.take(7).map_err(|_| corrupt("truncated header"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().map_err(|_| corrupt("truncated header"))?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let dim = r.u32().map_err(|_| corrupt("truncated header"))? as usize;
        let count = r.u64().map_err(|_| corrupt("truncated header"))? as usize;
        let record = 8 + 4 * dim;
        if r.remaining() != count.saturating_mul(record) {
            return Err(corrupt("record block length does not match count"));
        }
        let mut table = Self::new(dim);
        for _ in 0..count {
            let id = r.u64().map_err(|_| corrupt("truncated record"))?;
            let v = r.f32_vec(dim).map_err(|_| corrupt("truncated record"))?;
            table.push(id, &v)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
