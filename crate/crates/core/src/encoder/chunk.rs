use std::collections::BTreeSet;

use crate::tokenizer::TokenId;

/// Length limit of the CLIP text encoder the chunk rule was built around.
pub const DEFAULT_CHUNK_CAP: usize = 75;

/// Truncated left context used as the retrieval query for one position.
///
/// `source_range` is half-open: the chunk is `seq[start..end]` and `end` is
/// the query position itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextChunk {
    pub tokens: Vec<TokenId>,
    pub source_range: (usize, usize),
}

impl ContextChunk {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

/// Left context of position `i`, starting right after the closest stop token
/// before `i` unless that would exceed `chunk_cap` tokens, in which case the
/// last `chunk_cap` tokens are kept.
///
/// `i` is clamped to `seq.len()`; `chunk_cap` of zero is treated as one.
pub fn build_context_chunk(
    seq: &[TokenId],
    i: usize,
    chunk_cap: usize,
    stop_set: &BTreeSet<TokenId>,
) -> ContextChunk {
    let i = i.min(seq.len());
    let cap = chunk_cap.max(1);
    let t = seq[..i]
        .iter()
        .rposition(|tok| stop_set.contains(tok))
        .map_or(0, |j| j + 1);
    let start = if i - t < cap { t } else { i - cap };
    ContextChunk {
        tokens: seq[start..i].to_vec(),
        source_range: (start, i),
    }
}
