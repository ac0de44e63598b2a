//! Visually-augmented language modeling at desk scale.
//!
//! * [`encoder`]: frozen joint text/image encoders and the context-chunk rule.
//! * [`vindex`]: inner-product IVF-PQ index over image keys, with an exact
//!   brute-force oracle.
//! * [`model`]: causal decoder with a visual knowledge fusion layer, exact
//!   forward and backward passes.
//! * [`trainer`]: Adam with warmup and inverse-sqrt decay over token blocks.
//! * [`augment`]: per-position retrieval, ablation modes, retrieval caches
//!   and the synthetic grounded corpus.
//! * [`evalkit`]: zero-shot label ranking, PIQA-style scoring, perplexity.

pub mod augment;
pub mod corpus;
pub mod encoder;
pub mod evalkit;
pub mod io;
pub mod kv;
pub mod model;
pub mod rng;
pub mod tokenizer;
pub mod trainer;
pub mod vindex;

pub use encoder::{EmbeddingVector, ImageRecord, JointEncoder, SyntheticEncoder};
pub use model::{ModelConfig, ModelState, ProjMode, RetrievedImageSet};
pub use tokenizer::{TokenId, Tokenizer};
pub use corpus::Corpus;
pub use vindex::{IvfPqIndex, SearchResult};
