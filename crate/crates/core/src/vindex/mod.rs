//! The image knowledge base: an inner-product IVF index with product
//! quantization.
//!
//! Coarse centroids come from Euclidean k-means on a training sample, but
//! both posting-list assignment and query routing use the inner product, so
//! the metric is the same end to end. Codes quantize the raw vectors, which
//! keeps scoring a plain lookup-table sum. An exact-code mode stores raw
//! vectors instead of PQ codes; with `nprobe = C` it reproduces
//! [`brute_force_search`] exactly.

mod file;
mod kmeans;
mod pq;
mod topk;

use std::collections::HashSet;

use rayon::prelude::*;
use thiserror::Error;

pub use kmeans::kmeans;
pub use pq::{ProductQuantizer, KSUB};
use topk::TopK;

use crate::encoder::dot;

/// Large-scale operating point, for reference; desk defaults are smaller.
pub const LARGE_SCALE_CENTROIDS: usize = 131_072;
pub const LARGE_SCALE_CODE_BYTES: usize = 32;
pub const LARGE_SCALE_NPROBE: usize = 32;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("need at least {needed} training vectors, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("index is not trained")]
    NotTrained,
    #[error("duplicate image id {0}")]
    DuplicateId(u64),
    #[error("invalid search parameters: {0}")]
    InvalidParams(String),
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// How stored vectors are encoded in the posting lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeMode {
    /// `M` one-byte product-quantizer codes per vector.
    Pq { m: usize },
    /// Raw f32 vectors: every stored vector is its own codeword.
    Exact,
}

impl CodeMode {
    fn code_len(self, dim: usize) -> usize {
        match self {
            CodeMode::Pq { m } => m,
            CodeMode::Exact => dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexParams {
    pub dim: usize,
    pub n_centroids: usize,
    pub codes: CodeMode,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl IndexParams {
    /// Desk-scale defaults: C=256, M=8 (8-byte codes), 20 k-means passes.
    pub fn desk(dim: usize) -> Self {
        Self {
            dim,
            n_centroids: 256,
            codes: CodeMode::Pq { m: 8 },
            kmeans_iters: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PostingList {
    ids: Vec<u64>,
    /// PQ codes, `m` bytes per entry (PQ mode only).
    codes: Vec<u8>,
    /// Raw vectors, `dim` floats per entry (exact mode only).
    raw: Vec<f32>,
}

/// Ranked neighbors: scores non-increasing, ties by ascending id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchResult {
    pub ids: Vec<u64>,
    pub scores: Vec<f32>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    params: IndexParams,
    centroids: Vec<f32>,
    pq: Option<ProductQuantizer>,
    lists: Vec<PostingList>,
    trained: bool,
    present: HashSet<u64>,
}

/// Trains coarse centroids and (in PQ mode) codebooks on `sample`.
pub fn train_index(sample: &[Vec<f32>], params: IndexParams) -> Result<IvfPqIndex, IndexError> {
    let mut idx = IvfPqIndex::new(params)?;
    idx.train(sample)?;
    Ok(idx)
}

/// Exact top-k by true dot product, ties by ascending id.
pub fn brute_force_search<'a>(
    store: impl IntoIterator<Item = (u64, &'a [f32])>,
    query: &[f32],
    k: usize,
) -> SearchResult {
    let mut top = TopK::new(k);
    for (id, v) in store {
        top.push(dot(query, v), id);
    }
    top.into_result()
}

impl IvfPqIndex {
    /// An untrained, empty index.
    pub fn new(params: IndexParams) -> Result<Self, IndexError> {
        if params.dim == 0 || params.n_centroids == 0 {
            return Err(IndexError::InvalidParams("dim and C must be positive".into()));
        }
        if let CodeMode::Pq { m } = params.codes {
            if m == 0 || !params.dim.is_multiple_of(m) {
                return Err(IndexError::DimMismatch(format!(
                    "dimension {} not divisible by M={m}",
                    params.dim
                )));
            }
        }
        Ok(Self {
            params,
            centroids: Vec::new(),
            pq: None,
            lists: Vec::new(),
            trained: false,
            present: HashSet::new(),
        })
    }

    pub fn train(&mut self, sample: &[Vec<f32>]) -> Result<(), IndexError> {
        let p = self.params;
        let needed = match p.codes {
            CodeMode::Pq { .. } => p.n_centroids.max(KSUB),
            CodeMode::Exact => p.n_centroids,
        };
        if sample.len() < needed {
            return Err(IndexError::InsufficientSamples {
                needed,
                got: sample.len(),
            });
        }
        let mut flat = Vec::with_capacity(sample.len() * p.dim);
        for v in sample {
            self.check_dim(v)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(IndexError::InvalidParams("non-finite training vector".into()));
            }
            flat.extend_from_slice(v);
        }
        self.centroids = kmeans(&flat, p.dim, p.n_centroids, p.kmeans_iters, p.seed);
        self.pq = match p.codes {
            CodeMode::Pq { m } => Some(ProductQuantizer::train(
                &flat,
                p.dim,
                m,
                p.kmeans_iters,
                p.seed,
            )),
            CodeMode::Exact => None,
        };
        self.lists = vec![PostingList::default(); p.n_centroids];
        self.present.clear();
        self.trained = true;
        Ok(())
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn n_centroids(&self) -> usize {
        self.params.n_centroids
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn quantizer(&self) -> Option<&ProductQuantizer> {
        self.pq.as_ref()
    }

    pub fn list_ids(&self, list: usize) -> &[u64] {
        &self.lists[list].ids
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.ids.len()).collect()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.present.contains(&id)
    }

    fn check_dim(&self, v: &[f32]) -> Result<(), IndexError> {
        if v.len() != self.params.dim {
            return Err(IndexError::DimMismatch(format!(
                "expected {}, got {}",
                self.params.dim,
                v.len()
            )));
        }
        Ok(())
    }

    /// Posting list a vector belongs to: the centroid with the largest inner
    /// product, lowest index on ties.
    pub fn assign(&self, v: &[f32]) -> usize {
        let mut best = (f32::NEG_INFINITY, 0);
        for (c, cent) in self.centroids.chunks(self.params.dim).enumerate() {
            let s = dot(v, cent);
            if s > best.0 {
                best = (s, c);
            }
        }
        best.1
    }

    /// Encodes and appends entries. The batch is validated as a whole
    /// before anything is stored. Returns the new total count.
    pub fn add_keys<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (u64, &'a [f32])>,
    ) -> Result<usize, IndexError> {
        if !self.trained {
            return Err(IndexError::NotTrained);
        }
        let entries: Vec<(u64, &[f32])> = entries.into_iter().collect();
        let mut batch = HashSet::with_capacity(entries.len());
        for &(id, v) in &entries {
            self.check_dim(v)?;
            if self.present.contains(&id) || !batch.insert(id) {
                return Err(IndexError::DuplicateId(id));
            }
        }
        let encoded: Vec<(usize, Vec<u8>)> = entries
            .par_iter()
            .map(|&(_, v)| {
                let code = self.pq.as_ref().map(|pq| pq.encode(v)).unwrap_or_default();
                (self.assign(v), code)
            })
            .collect();
        for ((id, v), (list, code)) in entries.into_iter().zip(encoded) {
            let list = &mut self.lists[list];
            list.ids.push(id);
            match self.params.codes {
                CodeMode::Pq { .. } => list.codes.extend_from_slice(&code),
                CodeMode::Exact => list.raw.extend_from_slice(v),
            }
            self.present.insert(id);
        }
        Ok(self.len())
    }

    /// Approximate top-k: routes to the `nprobe` centroids with the highest
    /// inner product with the query and scores candidates by ADC.
    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<SearchResult, IndexError> {
        if !self.trained {
            return Err(IndexError::NotTrained);
        }
        self.check_dim(query)?;
        if k == 0 {
            return Err(IndexError::InvalidParams("k must be at least 1".into()));
        }
        if nprobe == 0 || nprobe > self.params.n_centroids {
            return Err(IndexError::InvalidParams(format!(
                "nprobe {nprobe} outside 1..={}",
                self.params.n_centroids
            )));
        }
        let mut routing: Vec<(f32, usize)> = self
            .centroids
            .chunks(self.params.dim)
            .map(|c| dot(query, c))
            .zip(0..)
            .collect();
        routing.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut top = TopK::new(k);
        match (&self.pq, self.params.codes) {
            (Some(pq), CodeMode::Pq { m }) => {
                let lut = pq.lookup_table(query);
                for &(_, list) in &routing[..nprobe] {
                    let list = &self.lists[list];
                    for (id, code) in list.ids.iter().zip(list.codes.chunks(m)) {
                        top.push(ProductQuantizer::adc(&lut, code), *id);
                    }
                }
            }
            _ => {
                for &(_, list) in &routing[..nprobe] {
                    let list = &self.lists[list];
                    for (id, v) in list.ids.iter().zip(list.raw.chunks(self.params.dim)) {
                        top.push(dot(query, v), *id);
                    }
                }
            }
        }
        Ok(top.into_result())
    }

    /// Runs independent searches in parallel; output order follows input.
    pub fn search_batch(
        &self,
        queries: &[Vec<f32>],
        k: usize,
        nprobe: usize,
    ) -> Result<Vec<SearchResult>, IndexError> {
        queries.par_iter().map(|q| self.search(q, k, nprobe)).collect()
    }

    /// Stored representation of `id`, decoded from its code.
    pub fn reconstruct(&self, id: u64) -> Option<Vec<f32>> {
        let dim = self.params.dim;
        for list in &self.lists {
            if let Some(pos) = list.ids.iter().position(|&x| x == id) {
                return Some(match (&self.pq, self.params.codes) {
                    (Some(pq), CodeMode::Pq { m }) => pq.decode(&list.codes[pos * m..(pos + 1) * m]),
                    _ => list.raw[pos * dim..(pos + 1) * dim].to_vec(),
                });
            }
        }
        None
    }
}

/// Fraction of the exact top-k ids recovered by `approx`.
pub fn recall_at_k(exact: &SearchResult, approx: &SearchResult) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let truth: HashSet<u64> = exact.ids.iter().copied().collect();
    let hit = approx.ids.iter().filter(|id| truth.contains(id)).count();
    hit as f64 / exact.len() as f64
}
