//! Index snapshot format, all little-endian:
//!
//! ```text
//! magic      "VALMIVF"   7 bytes
//! version    u32         1
//! dim        u32         E
//! centroids  u32         C
//! m          u32         subquantizers (0 in exact-code mode)
//! count      u64         stored vectors
//! metric     u8          0 = inner product
//! ksub       u32         codewords per subquantizer (0 in exact-code mode)
//! iters      u32         k-means iterations used for training
//! seed       u64
//! checksum   u64         first 8 bytes of SHA-256 over the body
//! body:
//!   C × E f32                           centroids
//!   m × ksub × (E/m) f32                codebooks
//!   C × { len u64, len × id u64,
//!         len × (m u8 | E f32) }        posting lists
//! ```

use std::collections::HashSet;
use std::path::Path;

use super::{CodeMode, IndexError, IndexParams, IvfPqIndex, PostingList, ProductQuantizer, KSUB};
use crate::io::{atomic_write, checksum64, ByteReader, PutLe};

pub const MAGIC: &[u8; 7] = b"VALMIVF";
pub const VERSION: u32 = 1;
const METRIC_IP: u8 = 0;
const HEADER_LEN: usize = 7 + 4 + 4 + 4 + 4 + 8 + 1 + 4 + 4 + 8 + 8;

impl IvfPqIndex {
    fn body_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.put_f32s(&self.centroids);
        if let Some(pq) = &self.pq {
            body.put_f32s(pq.codebooks());
        }
        for list in &self.lists {
            body.put_u64(list.ids.len() as u64);
            for &id in &list.ids {
                body.put_u64(id);
            }
            match self.params.codes {
                CodeMode::Pq { .. } => body.extend_from_slice(&list.codes),
                CodeMode::Exact => body.put_f32s(&list.raw),
            }
        }
        body
    }

    /// Checksum recorded in the snapshot header; identifies the exact
    /// contents of a trained index.
    pub fn checksum(&self) -> u64 {
        checksum64(&self.body_bytes())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IndexError> {
        if !self.trained {
            return Err(IndexError::NotTrained);
        }
        let body = self.body_bytes();
        let p = self.params;
        let (m, ksub) = match p.codes {
            CodeMode::Pq { m } => (m as u32, KSUB as u32),
            CodeMode::Exact => (0, 0),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.put_u32(VERSION);
        out.put_u32(p.dim as u32);
        out.put_u32(p.n_centroids as u32);
        out.put_u32(m);
        out.put_u64(self.len() as u64);
        out.put_u8(METRIC_IP);
        out.put_u32(ksub);
        out.put_u32(p.kmeans_iters as u32);
        out.put_u64(p.seed);
        out.put_u64(checksum64(&body));
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let corrupt = |why: &str| IndexError::CorruptIndex(why.to_string());
        let trunc = |_| corrupt("truncated");
        let mut r = ByteReader::new(bytes);
        if r.take(7).map_err(trunc)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().map_err(trunc)?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let dim = r.u32().map_err(trunc)? as usize;
        let n_centroids = r.u32().map_err(trunc)? as usize;
        let m = r.u32().map_err(trunc)? as usize;
        let count = r.u64().map_err(trunc)? as usize;
        if r.u8().map_err(trunc)? != METRIC_IP {
            return Err(corrupt("unsupported metric"));
        }
        let ksub = r.u32().map_err(trunc)? as usize;
        let kmeans_iters = r.u32().map_err(trunc)? as usize;
        let seed = r.u64().map_err(trunc)?;
        let checksum = r.u64().map_err(trunc)?;
        if checksum64(&bytes[r.position()..]) != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        let codes = match (m, ksub) {
            (0, 0) => CodeMode::Exact,
            (m, KSUB) if m > 0 && dim.is_multiple_of(m) => CodeMode::Pq { m },
            _ => return Err(corrupt("inconsistent quantizer header")),
        };
        let params = IndexParams {
            dim,
            n_centroids,
            codes,
            kmeans_iters,
            seed,
        };
        let mut idx = IvfPqIndex::new(params).map_err(|e| corrupt(&e.to_string()))?;
        idx.centroids = r
            .f32_vec(n_centroids.checked_mul(dim).ok_or_else(|| corrupt("size overflow"))?)
            .map_err(trunc)?;
        if let CodeMode::Pq { m } = codes {
            let books = r.f32_vec(KSUB * dim).map_err(trunc)?;
            idx.pq = Some(ProductQuantizer::from_codebooks(dim, m, books));
        }
        let code_len = codes.code_len(dim);
        let mut present = HashSet::with_capacity(count);
        let mut lists = Vec::with_capacity(n_centroids);
        for _ in 0..n_centroids {
            let len = r.u64().map_err(trunc)? as usize;
            let ids = r.u64_vec(len).map_err(trunc)?;
            for &id in &ids {
                if !present.insert(id) {
                    return Err(corrupt("id stored twice"));
                }
            }
            let mut list = PostingList {
                ids,
                ..Default::default()
            };
            match codes {
                CodeMode::Pq { .. } => {
                    list.codes = r.take(len * code_len).map_err(trunc)?.to_vec();
                }
                CodeMode::Exact => list.raw = r.f32_vec(len * code_len).map_err(trunc)?,
            }
            lists.push(list);
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        if present.len() != count {
            return Err(corrupt("count does not match posting lists"));
        }
        idx.lists = lists;
        idx.present = present;
        idx.trained = true;
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        atomic_write(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, unit_gaussian};
    use crate::vindex::train_index;

    fn built(codes: CodeMode, n: usize) -> IvfPqIndex {
        let mut rng = rng_for(8, &[]);
        let keys: Vec<Vec<f32>> = (0..300)
            .map(|_| unit_gaussian(&mut rng, 16).into_iter().map(|x| x as f32).collect())
            .collect();
        let params = IndexParams {
            dim: 16,
            n_centroids: 8,
            codes,
            kmeans_iters: 4,
            seed: 1,
        };
        let mut idx = train_index(&keys, params).unwrap();
        idx.add_keys(keys.iter().take(n).enumerate().map(|(i, k)| (i as u64 * 3, &k[..])))
            .unwrap();
        idx
    }

    #[test]
    fn roundtrip_is_exact() {
        for codes in [CodeMode::Pq { m: 4 }, CodeMode::Exact] {
            for n in [0, 300] {
                let idx = built(codes, n);
                let bytes = idx.to_bytes().unwrap();
                let back = IvfPqIndex::from_bytes(&bytes).unwrap();
                assert_eq!(back, idx);
                assert_eq!(back.to_bytes().unwrap(), bytes);
            }
        }
    }

    #[test]
    fn damaged_files_are_corrupt() {
        let bytes = built(CodeMode::Pq { m: 4 }, 300).to_bytes().unwrap();
        for cut in [0, 6, HEADER_LEN - 1, HEADER_LEN + 10, bytes.len() - 1] {
            assert!(matches!(
                IvfPqIndex::from_bytes(&bytes[..cut]),
                Err(IndexError::CorruptIndex(_))
            ));
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(
            IvfPqIndex::from_bytes(&flipped),
            Err(IndexError::CorruptIndex(_))
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            IvfPqIndex::from_bytes(&magic),
            Err(IndexError::CorruptIndex(_))
        ));
    }

    #[test]
    fn untrained_cannot_be_saved() {
        let idx = IvfPqIndex::new(IndexParams::desk(16)).unwrap();
        assert!(matches!(idx.to_bytes(), Err(IndexError::NotTrained)));
    }
}
