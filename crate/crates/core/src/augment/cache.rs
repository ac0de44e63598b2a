//! Precomputed retrieval results, all little-endian:
//!
//! ```text
//! magic          "VALMRC"  6 bytes
//! version        u32       1
//! corpus_hash    u64
//! encoder_id     u32 length + UTF-8 bytes
//! index_checksum u64
//! k, nprobe, stride  u32 each
//! count          u64       records
//! records, sorted by (doc, pos):
//!   doc u32, pos u32, n u32, n × id u64, n × score f32
//! checksum       u64       first 8 bytes of SHA-256 over everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{search_corpus, AugmentError, AugmentationPlan, RetrievalMode, Retriever};
use crate::corpus::Corpus;
use crate::encoder::JointEncoder;
use crate::io::{atomic_write, checksum64, ByteReader, PutLe};
use crate::vindex::IvfPqIndex;

pub const CACHE_MAGIC: &[u8; 6] = b"VALMRC";
pub const CACHE_VERSION: u32 = 1;

/// What a cache was computed from; a cache is only valid for these inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheBinding {
    pub corpus_hash: u64,
    pub encoder_id: String,
    pub index_checksum: u64,
    pub k: usize,
    pub nprobe: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalCache {
    binding: CacheBinding,
    entries: BTreeMap<(usize, usize), Vec<(u64, f32)>>,
}

impl RetrievalCache {
    /// Runs live retrieval over every covered corpus position.
    pub fn build(
        corpus: &Corpus,
        plan: &AugmentationPlan,
        retriever: &Retriever<'_>,
    ) -> Result<Self, AugmentError> {
        plan.validate()?;
        if plan.mode != RetrievalMode::Retrieve {
            return Err(AugmentError::InvalidPlan(
                "caches are built in retrieve mode".into(),
            ));
        }
        let per_doc = search_corpus(corpus, plan, retriever)?;
        let entries = per_doc
            .into_iter()
            .enumerate()
            .flat_map(|(doc, hits)| hits.into_iter().map(move |(pos, h)| ((doc, pos), h)))
            .collect();
        Ok(Self {
            binding: CacheBinding {
                corpus_hash: corpus.hash(),
                encoder_id: retriever.encoder.id(),
                index_checksum: retriever.index.checksum(),
                k: plan.k,
                nprobe: plan.nprobe,
                stride: plan.stride,
            },
            entries,
        })
    }

    pub fn binding(&self) -> &CacheBinding {
        &self.binding
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, doc: usize, pos: usize) -> Option<&[(u64, f32)]> {
        self.entries.get(&(doc, pos)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &[(u64, f32)])> {
        self.entries.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Checks the cache was computed for exactly these inputs.
    pub fn check_binding(
        &self,
        corpus: &Corpus,
        encoder: &dyn JointEncoder,
        index: &IvfPqIndex,
    ) -> Result<(), AugmentError> {
        let b = &self.binding;
        let mismatch = |what: &str| Err(AugmentError::BindingMismatch(what.to_string()));
        if b.corpus_hash != corpus.hash() {
            return mismatch("corpus changed");
        }
        if b.encoder_id != encoder.id() {
            return mismatch("encoder changed");
        }
        if b.index_checksum != index.checksum() {
            return mismatch("index changed");
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let b = &self.binding;
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.put_u32(CACHE_VERSION);
        out.put_u64(b.corpus_hash);
        out.put_str(&b.encoder_id);
        out.put_u64(b.index_checksum);
        out.put_u32(b.k as u32);
        out.put_u32(b.nprobe as u32);
        out.put_u32(b.stride as u32);
        out.put_u64(self.entries.len() as u64);
        for (&(doc, pos), hits) in &self.entries {
            out.put_u32(doc as u32);
            out.put_u32(pos as u32);
            out.put_u32(hits.len() as u32);
            for &(id, _) in hits {
                out.put_u64(id);
            }
            for &(_, s) in hits {
                out.put_f32(s);
            }
        }
        let sum = checksum64(&out);
        out.put_u64(sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AugmentError> {
        let corrupt = |why: &str| AugmentError::CorruptCache(why.to_string());
        let trunc = |_| corrupt("truncated");
        if bytes.len() < CACHE_MAGIC.len() + 8 {
            return Err(corrupt("truncated"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = ByteReader::new(payload);
        if r.take(6).map_err(trunc)? != CACHE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        if ByteReader::new(tail).u64().map_err(trunc)? != checksum64(payload) {
            return Err(corrupt("checksum mismatch"));
        }
        let version = r.u32().map_err(trunc)?;
        if version != CACHE_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let binding = CacheBinding {
            corpus_hash: r.u64().map_err(trunc)?,
            encoder_id: r.string().map_err(trunc)?,
            index_checksum: r.u64().map_err(trunc)?,
            k: r.u32().map_err(trunc)? as usize,
            nprobe: r.u32().map_err(trunc)? as usize,
            stride: r.u32().map_err(trunc)? as usize,
        };
        let count = r.u64().map_err(trunc)?;
        let mut entries = BTreeMap::new();
        let mut last = None;
        for _ in 0..count {
            let key = (r.u32().map_err(trunc)? as usize, r.u32().map_err(trunc)? as usize);
            if last.is_some_and(|prev| prev >= key) {
                return Err(corrupt("records out of order"));
            }
            last = Some(key);
            let n = r.u32().map_err(trunc)? as usize;
            if n > binding.k {
                return Err(corrupt("record longer than k"));
            }
            let ids = r.u64_vec(n).map_err(trunc)?;
            let scores = r.f32_vec(n).map_err(trunc)?;
            entries.insert(key, ids.into_iter().zip(scores).collect());
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { binding, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), AugmentError> {
        atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
