//! Per-position image retrieval for the fusion layer.
//!
//! For each position `i ≥ 1` the context chunk of `i` is encoded as a text
//! query and the top-K image keys are fetched from the index. Ablation modes
//! replace the search with nothing (`Disabled`) or with query-independent
//! seeded draws from the knowledge base (`Random`). Image vectors handed to
//! the model are read from the raw key store, not reconstructed from codes.

mod cache;
mod grounded;

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use cache::{CacheBinding, RetrievalCache, CACHE_MAGIC, CACHE_VERSION};
pub use grounded::{
    generate_grounded_corpus, GroundedCorpus, GroundedCorpusSpec, GroundedItem, ATTRIBUTE_WORDS,
    PROMPT_TEMPLATES,
};

use crate::corpus::Corpus;
use crate::encoder::{
    build_context_chunk, encode_text_query, EmbeddingTable, EncoderError, JointEncoder,
};
use crate::model::{ImageSlots, RetrievedImageSet};
use crate::rng::{hash_tokens, rng_for};
use crate::tokenizer::TokenId;
use crate::vindex::{IndexError, IvfPqIndex};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("retrieval index unavailable: {0}")]
    IndexUnavailable(String),
    #[error("encoder mismatch: {0}")]
    EncoderMismatch(String),
    #[error("position {pos} out of range for sequence of {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("{got} replacement images exceed K = {k}")]
    TooManyReplacements { got: usize, k: usize },
    #[error("retrieval cache does not match: {0}")]
    BindingMismatch(String),
    #[error("retrieval cache has no entry for document {doc} position {pos}")]
    CacheMiss { doc: usize, pos: usize },
    #[error("corrupt retrieval cache: {0}")]
    CorruptCache(String),
    #[error("image id {0} missing from the key store")]
    UnknownImage(u64),
    #[error("infeasible corpus spec: {0}")]
    SpecInfeasible(String),
    #[error("invalid augmentation plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RetrievalMode {
    Retrieve,
    Disabled,
    Random,
}

impl RetrievalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::Retrieve => "retrieve",
            RetrievalMode::Disabled => "disabled",
            RetrievalMode::Random => "random",
        }
    }
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieve" => Ok(RetrievalMode::Retrieve),
            "disabled" | "disable" => Ok(RetrievalMode::Disabled),
            "random" => Ok(RetrievalMode::Random),
            other => Err(format!("unknown retrieval mode '{other}'")),
        }
    }
}

/// How positions get their image slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentationPlan {
    pub mode: RetrievalMode,
    pub k: usize,
    pub nprobe: usize,
    /// Retrieve at every `stride`-th position only.
    pub stride: usize,
    /// Seed of the `Random` draws.
    pub seed: u64,
}

impl AugmentationPlan {
    /// `Disabled` forces `k = 0`.
    pub fn new(mode: RetrievalMode, k: usize, nprobe: usize, seed: u64) -> Self {
        let k = if mode == RetrievalMode::Disabled { 0 } else { k };
        Self {
            mode,
            k,
            nprobe,
            stride: 1,
            seed,
        }
    }

    pub fn disabled() -> Self {
        Self::new(RetrievalMode::Disabled, 0, 1, 0)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidPlan(m.to_string()));
        match self.mode {
            RetrievalMode::Disabled if self.k != 0 => bad("disabled mode requires k = 0"),
            RetrievalMode::Retrieve | RetrievalMode::Random if self.k == 0 => {
                bad("k must be at least 1")
            }
            RetrievalMode::Retrieve if self.nprobe == 0 => bad("nprobe must be at least 1"),
            _ if self.stride == 0 => bad("stride must be at least 1"),
            _ => Ok(()),
        }
    }

    fn covers(&self, pos: usize) -> bool {
        pos >= 1 && pos.is_multiple_of(self.stride)
    }
}

/// Live retrieval: encoder, index and the key store that supplies vectors.
pub struct Retriever<'a> {
    pub encoder: &'a dyn JointEncoder,
    pub index: &'a IvfPqIndex,
    pub keys: &'a EmbeddingTable,
    pub stop_set: BTreeSet<TokenId>,
    pub chunk_cap: usize,
}

impl<'a> Retriever<'a> {
    pub fn new(
        encoder: &'a dyn JointEncoder,
        index: &'a IvfPqIndex,
        keys: &'a EmbeddingTable,
        stop_set: BTreeSet<TokenId>,
    ) -> Result<Self, AugmentError> {
        if encoder.dim() != index.dim() || keys.dim() != index.dim() {
            return Err(AugmentError::EncoderMismatch(format!(
                "encoder dim {}, index dim {}, key store dim {}",
                encoder.dim(),
                index.dim(),
                keys.dim()
            )));
        }
        if !index.is_trained() {
            return Err(AugmentError::IndexUnavailable("index is not trained".into()));
        }
        Ok(Self {
            encoder,
            index,
            keys,
            stop_set,
            chunk_cap: encoder.max_chunk_len(),
        })
    }

    /// Top-`k` `(id, score)` pairs for position `pos` of `seq`; empty when
    /// the context chunk is empty.
    pub fn search_position(
        &self,
        seq: &[TokenId],
        pos: usize,
        k: usize,
        nprobe: usize,
    ) -> Result<Vec<(u64, f32)>, AugmentError> {
        let chunk = build_context_chunk(seq, pos, self.chunk_cap, &self.stop_set);
        if chunk.is_empty() {
            return Ok(Vec::new());
        }
        let query = encode_text_query(self.encoder, &chunk)?;
        let res = self.index.search(&query, k, nprobe)?;
        Ok(res.ids.into_iter().zip(res.scores).collect())
    }
}

/// Turns `(id, score)` hits into model-ready slots.
pub fn slots_from_hits(keys: &EmbeddingTable, hits: &[(u64, f32)]) -> Result<ImageSlots, AugmentError> {
    let mut slots = ImageSlots::default();
    for &(id, score) in hits {
        let v = keys.get(id).ok_or(AugmentError::UnknownImage(id))?;
        slots.ids.push(id);
        slots.scores.push(score);
        slots.vectors.push(v.iter().map(|&x| f64::from(x)).collect());
    }
    Ok(slots)
}

/// Produces image slots for token sequences under a plan. `Random` mode
/// needs only the key store; `Retrieve` needs a [`Retriever`] or a cache.
pub struct Augmenter<'a> {
    plan: AugmentationPlan,
    retriever: Option<Retriever<'a>>,
    cache: Option<&'a RetrievalCache>,
    keys: Option<&'a EmbeddingTable>,
}

impl<'a> Augmenter<'a> {
    pub fn disabled() -> Self {
        Self {
            plan: AugmentationPlan::disabled(),
            retriever: None,
            cache: None,
            keys: None,
        }
    }

    pub fn live(plan: AugmentationPlan, retriever: Retriever<'a>) -> Result<Self, AugmentError> {
        plan.validate()?;
        let keys = Some(retriever.keys);
        Ok(Self {
            plan,
            retriever: Some(retriever),
            cache: None,
            keys,
        })
    }

    pub fn random(plan: AugmentationPlan, keys: &'a EmbeddingTable) -> Result<Self, AugmentError> {
        plan.validate()?;
        if keys.is_empty() {
            return Err(AugmentError::IndexUnavailable("empty key store".into()));
        }
        Ok(Self {
            plan,
            retriever: None,
            cache: None,
            keys: Some(keys),
        })
    }

    /// Serves corpus positions from a cache; sequences outside the corpus
    /// fall back to `retriever` when one is given.
    pub fn cached(
        plan: AugmentationPlan,
        cache: &'a RetrievalCache,
        keys: &'a EmbeddingTable,
        retriever: Option<Retriever<'a>>,
    ) -> Result<Self, AugmentError> {
        plan.validate()?;
        let b = cache.binding();
        if b.k != plan.k || b.nprobe != plan.nprobe || b.stride != plan.stride {
            return Err(AugmentError::BindingMismatch(format!(
                "cache has k={} nprobe={} stride={}, plan wants k={} nprobe={} stride={}",
                b.k, b.nprobe, b.stride, plan.k, plan.nprobe, plan.stride
            )));
        }
        Ok(Self {
            plan,
            retriever,
            cache: Some(cache),
            keys: Some(keys),
        })
    }

    pub fn plan(&self) -> &AugmentationPlan {
        &self.plan
    }

    pub fn retriever(&self) -> Option<&Retriever<'a>> {
        self.retriever.as_ref()
    }

    /// Seeded, query-independent ids for one position.
    fn random_hits(&self, stream: u64, pos: usize) -> Result<Vec<(u64, f32)>, AugmentError> {
        let keys = self
            .keys
            .ok_or_else(|| AugmentError::IndexUnavailable("random mode needs a key store".into()))?;
        let mut rng = rng_for(self.plan.seed, &[0x7a4d, stream, pos as u64]);
        Ok((0..self.plan.k)
            .map(|_| (keys.ids()[rng.random_range(0..keys.len())], 0.0))
            .collect())
    }

    fn hits_for(
        &self,
        seq: &[TokenId],
        stream: u64,
        cached_doc: Option<usize>,
        pos: usize,
    ) -> Result<Vec<(u64, f32)>, AugmentError> {
        if !self.plan.covers(pos) {
            return Ok(Vec::new());
        }
        match self.plan.mode {
            RetrievalMode::Disabled => Ok(Vec::new()),
            RetrievalMode::Random => self.random_hits(stream, pos),
            RetrievalMode::Retrieve => {
                if let (Some(cache), Some(doc)) = (self.cache, cached_doc) {
                    return cache
                        .get(doc, pos)
                        .map(<[_]>::to_vec)
                        .ok_or(AugmentError::CacheMiss { doc, pos });
                }
                let r = self.retriever.as_ref().ok_or_else(|| {
                    AugmentError::IndexUnavailable("retrieve mode needs an index".into())
                })?;
                r.search_position(seq, pos, self.plan.k, self.plan.nprobe)
            }
        }
    }

    fn slots(&self, hits: &[(u64, f32)]) -> Result<ImageSlots, AugmentError> {
        match self.keys {
            Some(keys) => slots_from_hits(keys, hits),
            None if hits.is_empty() => Ok(ImageSlots::default()),
            None => Err(AugmentError::IndexUnavailable("no key store".into())),
        }
    }

    /// Image slots for every position of a free-standing sequence.
    pub fn augment_positions(&self, seq: &[TokenId]) -> Result<RetrievedImageSet, AugmentError> {
        let stream = hash_tokens(seq);
        let slots = (0..seq.len())
            .map(|pos| self.slots(&self.hits_for(seq, stream, None, pos)?))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RetrievedImageSet::from_slots(slots))
    }

    /// Image slots for positions `start..start + len` of corpus document
    /// `doc`. Context chunks see the whole document, so a block gets the
    /// same images it would have inside the full sequence.
    pub fn augment_span(
        &self,
        corpus: &Corpus,
        doc: usize,
        start: usize,
        len: usize,
    ) -> Result<RetrievedImageSet, AugmentError> {
        let seq = corpus.doc(doc);
        if start + len > seq.len() {
            return Err(AugmentError::PositionOutOfRange {
                pos: start + len,
                len: seq.len(),
            });
        }
        let slots = (start..start + len)
            .map(|pos| self.slots(&self.hits_for(seq, doc as u64, Some(doc), pos)?))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RetrievedImageSet::from_slots(slots))
    }
}

/// `(pos, hits)` for the covered positions of one document.
pub(crate) type DocHits = Vec<(usize, Vec<(u64, f32)>)>;

/// Live top-K hits for every covered position of every document, computed
/// in parallel. Positions not covered get no entry.
pub(crate) fn search_corpus(
    corpus: &Corpus,
    plan: &AugmentationPlan,
    retriever: &Retriever<'_>,
) -> Result<Vec<DocHits>, AugmentError> {
    corpus
        .docs()
        .par_iter()
        .map(|seq| {
            (0..seq.len())
                .filter(|&pos| plan.covers(pos))
                .map(|pos| Ok((pos, retriever.search_position(seq, pos, plan.k, plan.nprobe)?)))
                .collect::<Result<Vec<_>, AugmentError>>()
        })
        .collect()
}

/// Replaces the slots of one position; every other position is untouched.
pub fn counterfactual_swap(
    images: &RetrievedImageSet,
    position: usize,
    replacement: ImageSlots,
    k: usize,
) -> Result<RetrievedImageSet, AugmentError> {
    if position >= images.len() {
        return Err(AugmentError::PositionOutOfRange {
            pos: position,
            len: images.len(),
        });
    }
    if replacement.len() > k {
        return Err(AugmentError::TooManyReplacements {
            got: replacement.len(),
            k,
        });
    }
    let mut out = images.clone();
    out.set(position, replacement);
    Ok(out)
}
