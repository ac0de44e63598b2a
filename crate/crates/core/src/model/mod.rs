//! Causal transformer decoder with a visual knowledge fusion layer.
//!
//! Every layer is a pre-norm decoder layer. At `fusion_layer` the attention
//! softmax for query position `i` runs over the causal text slots `j ≤ i`
//! *and* the image slots retrieved for position `i`. Image keys and values
//! are built from layer-normalized image embeddings; which projection
//! parameters they use is selected by [`ProjMode`]. Image slots carry no
//! positional encoding and are distinct per query position.
//!
//! Forward and backward passes are written out by hand in f64 so gradients
//! can be checked against finite differences.

mod backward;
mod checkpoint;
mod forward;
mod kernels;
mod params;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{ForwardOutput, LayerActivations};
pub use kernels::log_softmax;
pub use params::{FusionParams, LayerParams, ModelParams, TensorSpec};

use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
}

/// Which projection parameters image slots use for their keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProjMode {
    /// Text `W^K, W^V` with image-specific biases.
    SharedWeightsImageBias,
    /// Image-specific weights and biases.
    ImageSpecificWeightsAndBias,
    /// Text weights and text biases.
    SharedAll,
}

impl ProjMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjMode::SharedWeightsImageBias => "shared-weights-image-bias",
            ProjMode::ImageSpecificWeightsAndBias => "image-specific",
            ProjMode::SharedAll => "shared-all",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ProjMode::SharedWeightsImageBias => 0,
            ProjMode::ImageSpecificWeightsAndBias => 1,
            ProjMode::SharedAll => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ProjMode::SharedWeightsImageBias),
            1 => Some(ProjMode::ImageSpecificWeightsAndBias),
            2 => Some(ProjMode::SharedAll),
            _ => None,
        }
    }
}

impl std::str::FromStr for ProjMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shared-weights-image-bias" | "image-bias" | "bias" => {
                Ok(ProjMode::SharedWeightsImageBias)
            }
            "image-specific" | "image-specific-weights-and-bias" => {
                Ok(ProjMode::ImageSpecificWeightsAndBias)
            }
            "shared-all" | "shared" => Ok(ProjMode::SharedAll),
            other => Err(format!("unknown projection mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Zero-based index of the fusion layer; the second-to-last by default.
    pub fusion_layer: usize,
    /// Maximum image slots per position.
    pub num_images: usize,
    pub proj_mode: ProjMode,
    pub ln_img_eps: f64,
    pub ln_eps: f64,
    /// Attention-weight dropout; only active when a training RNG is given.
    pub dropout: f64,
    pub ffn_mult: usize,
}

impl ModelConfig {
    /// Layer layout with the fusion layer at the second-to-last position.
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab: usize, max_seq: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            vocab,
            max_seq,
            fusion_layer: n_layers.saturating_sub(2),
            num_images: 4,
            proj_mode: ProjMode::SharedWeightsImageBias,
            ln_img_eps: 1e-5,
            ln_eps: 1e-5,
            dropout: 0.0,
            ffn_mult: 4,
        }
    }

    /// GPT-2-small sized layout (12 layers, 12 heads, width 768).
    pub fn gpt2_small(vocab: usize) -> Self {
        Self::new(12, 12, 768, vocab, 512)
    }

    /// Two layers, two heads, width 16: for tests.
    pub fn tiny(vocab: usize, num_images: usize) -> Self {
        Self {
            num_images,
            ..Self::new(2, 2, 16, vocab, 16)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("layers, heads and width must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "width {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.fusion_layer >= self.n_layers {
            return bad(format!(
                "fusion layer {} outside 0..{}",
                self.fusion_layer, self.n_layers
            ));
        }
        if self.vocab == 0 || self.max_seq == 0 || self.ffn_mult == 0 {
            return bad("vocab, max_seq and ffn_mult must be positive".into());
        }
        if !(self.ln_img_eps > 0.0 && self.ln_eps > 0.0) {
            return bad("layer-norm eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Images retrieved for one position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageSlots {
    pub ids: Vec<u64>,
    pub scores: Vec<f32>,
    pub vectors: Vec<Vec<f64>>,
}

impl ImageSlots {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Per-position image slots aligned with a token sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievedImageSet {
    positions: Vec<ImageSlots>,
}

impl RetrievedImageSet {
    /// `len` positions, none with images.
    pub fn empty(len: usize) -> Self {
        Self {
            positions: vec![ImageSlots::default(); len],
        }
    }

    pub fn from_slots(positions: Vec<ImageSlots>) -> Self {
        Self { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn slots(&self, pos: usize) -> &ImageSlots {
        &self.positions[pos]
    }

    pub fn positions(&self) -> &[ImageSlots] {
        &self.positions
    }

    pub fn set(&mut self, pos: usize, slots: ImageSlots) {
        self.positions[pos] = slots;
    }

    pub fn count(&self, pos: usize) -> usize {
        self.positions[pos].len()
    }

    pub fn total(&self) -> usize {
        self.positions.iter().map(ImageSlots::len).sum()
    }

    /// Copy of positions `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            positions: self.positions[start..end].to_vec(),
        }
    }

    pub fn push(&mut self, slots: ImageSlots) {
        self.positions.push(slots);
    }
}

/// Model configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            params: ModelParams::init(&config, seed),
            config,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn check_inputs(&self, tokens: &[TokenId], images: &RetrievedImageSet) -> Result<(), ModelError> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(ModelError::ShapeMismatch("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_seq {
            return Err(ModelError::ShapeMismatch(format!(
                "sequence of {} exceeds max_seq {}",
                tokens.len(),
                cfg.max_seq
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(ModelError::ShapeMismatch(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        if images.len() != tokens.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} image positions for {} tokens",
                images.len(),
                tokens.len()
            )));
        }
        for (pos, slots) in images.positions().iter().enumerate() {
            if slots.len() > cfg.num_images {
                return Err(ModelError::ShapeMismatch(format!(
                    "position {pos} has {} images, limit {}",
                    slots.len(),
                    cfg.num_images
                )));
            }
            for v in &slots.vectors {
                if v.len() != cfg.d_model {
                    return Err(ModelError::ShapeMismatch(format!(
                        "image vector of dim {} at position {pos}, model width {}",
                        v.len(),
                        cfg.d_model
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(ModelError::NonFiniteInput(format!(
                        "image vector at position {pos}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Logits for every position plus per-layer activations.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        images: &RetrievedImageSet,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_inputs(tokens, images)?;
        let cache = forward::run(self, tokens, Some(images), None);
        Ok(cache.into_output())
    }

    /// The same weights run as a plain causal decoder: every layer,
    /// including the fusion layer, uses text-only self-attention and the
    /// image branch is never entered.
    pub fn forward_plain(&self, tokens: &[TokenId]) -> Result<ForwardOutput, ModelError> {
        self.check_inputs(tokens, &RetrievedImageSet::empty(tokens.len()))?;
        Ok(forward::run(self, tokens, None, None).into_output())
    }

    /// Mean next-token negative log-likelihood over positions `1..len`.
    pub fn nll(&self, tokens: &[TokenId], images: &RetrievedImageSet) -> Result<f64, ModelError> {
        let lp = self.target_logprobs(tokens, images)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    /// `log P(tokens[i+1] | tokens[..=i])` for `i in 0..len-1`.
    pub fn target_logprobs(
        &self,
        tokens: &[TokenId],
        images: &RetrievedImageSet,
    ) -> Result<Vec<f64>, ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::ShapeMismatch("need at least two tokens".into()));
        }
        let out = self.forward(tokens, images)?;
        let v = self.config.vocab;
        Ok((0..tokens.len() - 1)
            .map(|i| log_softmax(&out.logits[i * v..(i + 1) * v])[tokens[i + 1] as usize])
            .collect())
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_token_logprobs(
        &self,
        prefix: &[TokenId],
        images: &RetrievedImageSet,
    ) -> Result<Vec<f64>, ModelError> {
        let out = self.forward(prefix, images)?;
        let v = self.config.vocab;
        let last = prefix.len() - 1;
        Ok(log_softmax(&out.logits[last * v..(last + 1) * v]))
    }

    /// Mean next-token NLL and its exact gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        tokens: &[TokenId],
        images: &RetrievedImageSet,
    ) -> Result<(f64, ModelParams), ModelError> {
        self.loss_and_grads_inner(tokens, images, None)
    }

    /// As [`loss_and_grads`](Self::loss_and_grads) with attention dropout
    /// drawn from `rng` at the configured rate.
    pub fn loss_and_grads_train(
        &self,
        tokens: &[TokenId],
        images: &RetrievedImageSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, ModelParams), ModelError> {
        let rng = (self.config.dropout > 0.0).then_some(rng);
        self.loss_and_grads_inner(tokens, images, rng)
    }

    fn loss_and_grads_inner(
        &self,
        tokens: &[TokenId],
        images: &RetrievedImageSet,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ModelParams), ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::ShapeMismatch("need at least two tokens".into()));
        }
        self.check_inputs(tokens, images)?;
        let cache = forward::run(self, tokens, Some(images), rng);
        Ok(backward::run(self, &cache))
    }
}

#[cfg(test)]
mod tests;
