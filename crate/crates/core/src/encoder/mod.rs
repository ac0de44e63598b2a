//! Frozen dual encoder standing in for the CLIP text/image pair, and the
//! context-chunk rule that turns a token position into a text query.

mod chunk;
pub mod embfile;
mod precomputed;
mod synthetic;

use thiserror::Error;

pub use chunk::{build_context_chunk, ContextChunk, DEFAULT_CHUNK_CAP};
pub use embfile::EmbeddingTable;
pub use precomputed::PrecomputedEncoder;
pub use synthetic::SyntheticEncoder;

use crate::tokenizer::TokenId;

/// Vector in the shared text/image space. Stored as f32 like the index.
pub type EmbeddingVector = Vec<f32>;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("chunk of {len} tokens exceeds encoder limit {limit}")]
    ChunkTooLong { len: usize, limit: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no precomputed embedding for {0}")]
    MissingEmbedding(String),
    #[error("duplicate embedding id {0}")]
    DuplicateId(u64),
    #[error("corrupt embedding file: {0}")]
    CorruptEmbeddings(String),
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One entry of the image collection. The synthetic encoder places it on
/// the sphere from its (object, attribute) pair; file-backed encoders only
/// use `id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageRecord {
    pub id: u64,
    pub object: TokenId,
    pub attribute: u32,
}

/// Frozen text and image encoders mapping into one embedding space.
///
/// Implementations take `&self` only: nothing downstream can mutate encoder
/// state, and calls may run concurrently.
pub trait JointEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Short string naming the variant and its parameters; bound into
    /// retrieval caches.
    fn id(&self) -> String;

    /// Longest chunk the text side accepts.
    fn max_chunk_len(&self) -> usize;

    /// Encodes a non-empty token chunk.
    fn encode_text(&self, tokens: &[TokenId]) -> Result<EmbeddingVector, EncoderError>;

    fn encode_image(&self, image: &ImageRecord) -> Result<EmbeddingVector, EncoderError>;

    /// Fixed vector standing for the empty chunk.
    fn null_query(&self) -> EmbeddingVector;

    /// Canonical serialization of all encoder parameters.
    fn state_bytes(&self) -> Vec<u8>;
}

/// Text-side query vector for a context chunk. The empty chunk maps to the
/// encoder's null query.
pub fn encode_text_query(
    enc: &dyn JointEncoder,
    chunk: &ContextChunk,
) -> Result<EmbeddingVector, EncoderError> {
    if chunk.len() > enc.max_chunk_len() {
        return Err(EncoderError::ChunkTooLong {
            len: chunk.len(),
            limit: enc.max_chunk_len(),
        });
    }
    if chunk.is_empty() {
        return Ok(enc.null_query());
    }
    let v = enc.encode_text(&chunk.tokens)?;
    check_vector(enc.dim(), v)
}

/// Image key stored in the knowledge base.
pub fn encode_image_key(
    enc: &dyn JointEncoder,
    image: &ImageRecord,
) -> Result<EmbeddingVector, EncoderError> {
    check_vector(enc.dim(), enc.encode_image(image)?)
}

fn check_vector(dim: usize, v: EmbeddingVector) -> Result<EmbeddingVector, EncoderError> {
    if v.len() != dim {
        return Err(EncoderError::DimMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EncoderError::InvalidSpec("encoder produced a non-finite value".into()));
    }
    Ok(v)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
