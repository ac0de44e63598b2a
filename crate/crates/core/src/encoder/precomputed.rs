use std::path::Path;

use super::{EmbeddingTable, EmbeddingVector, EncoderError, ImageRecord, JointEncoder};
use crate::io::checksum64;
use crate::rng::hash_tokens;
use crate::tokenizer::TokenId;

/// Encoder backed by embeddings exported from an external model.
///
/// Image keys are looked up by image id. Text queries are looked up by the
/// FNV-1a hash of the chunk's token ids (little-endian u32 each), so the
/// exporter must encode every chunk the corpus will produce. The null query
/// is the first standard basis vector.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    images: EmbeddingTable,
    texts: EmbeddingTable,
    max_chunk_len: usize,
}

impl PrecomputedEncoder {
    pub fn new(
        images: EmbeddingTable,
        texts: EmbeddingTable,
        max_chunk_len: usize,
    ) -> Result<Self, EncoderError> {
        if images.dim() != texts.dim() {
            return Err(EncoderError::DimMismatch {
                expected: images.dim(),
                got: texts.dim(),
            });
        }
        if images.dim() == 0 {
            return Err(EncoderError::InvalidSpec("zero dimension".into()));
        }
        Ok(Self {
            images,
            texts,
            max_chunk_len,
        })
    }

    pub fn load(images: &Path, texts: &Path, max_chunk_len: usize) -> Result<Self, EncoderError> {
        Self::new(
            EmbeddingTable::load(images)?,
            EmbeddingTable::load(texts)?,
            max_chunk_len,
        )
    }

    /// Key under which a chunk's text embedding is stored.
    pub fn chunk_key(tokens: &[TokenId]) -> u64 {
        hash_tokens(tokens)
    }
}

impl JointEncoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.images.dim()
    }

    fn id(&self) -> String {
        format!("precomputed-d{}-{:016x}", self.dim(), checksum64(&self.state_bytes()))
    }

    fn max_chunk_len(&self) -> usize {
        self.max_chunk_len
    }

    fn encode_text(&self, tokens: &[TokenId]) -> Result<EmbeddingVector, EncoderError> {
        let key = Self::chunk_key(tokens);
        self.texts
            .get(key)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| EncoderError::MissingEmbedding(format!("text chunk {key:016x}")))
    }

    fn encode_image(&self, image: &ImageRecord) -> Result<EmbeddingVector, EncoderError> {
        self.images
            .get(image.id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| EncoderError::MissingEmbedding(format!("image {}", image.id)))
    }

    fn null_query(&self) -> EmbeddingVector {
        let mut v = vec![0.0; self.dim()];
        v[0] = 1.0;
        v
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut out = self.images.to_bytes();
        out.extend(self.texts.to_bytes());
        out.extend((self.max_chunk_len as u64).to_le_bytes());
        out
    }
}
