//! Left-to-right LM training: Adam with linear warmup then inverse-sqrt
//! decay, global-norm gradient clipping, seeded block shuffling and
//! periodic checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{AugmentError, Augmenter};
use crate::corpus::Corpus;
use crate::model::{ModelError, ModelParams, ModelState};
use crate::rng::rng_for;
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus has no block of {0} tokens")]
    EmptyCorpus(usize),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Large-scale operating point: lr 5e-4, 4000 warmup steps, dropout
    /// 0.1, batch 128 of length 512.
    pub fn large_scale() -> Self {
        Self {
            lr: 5e-4,
            warmup_steps: 4000,
            total_steps: 500_000,
            batch_size: 128,
            seq_len: 512,
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        // lr = 0 is allowed: it runs the loop without moving parameters.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.seq_len < 2 {
            return bad("sequence length must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip norm must be positive".into());
        }
        Ok(())
    }

    /// Learning rate at 1-based step `s`: `lr·s/warmup` up to the warmup,
    /// then `lr·sqrt(warmup/s)`.
    pub fn lr_at(&self, s: usize) -> f64 {
        let w = self.warmup_steps;
        if w == 0 {
            self.lr / (s.max(1) as f64).sqrt()
        } else if s <= w {
            self.lr * (s as f64) / (w as f64)
        } else {
            self.lr * (w as f64 / s as f64).sqrt()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 8,
            seq_len: 64,
            dropout: 0.0,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: Some(1.0),
        }
    }
}

/// A contiguous training block: `len` tokens of `doc` from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub doc: usize,
    pub start: usize,
    pub len: usize,
}

/// Endless stream of batches over the corpus. Each epoch visits every
/// full block once in a seeded order; trailing partial blocks are dropped.
#[derive(Debug, Clone)]
pub struct BatchStream {
    blocks: Vec<Block>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    batch: usize,
    seed: u64,
}

impl BatchStream {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn shuffle(&mut self) {
        self.order = (0..self.blocks.len()).collect();
        self.order.shuffle(&mut rng_for(self.seed, &[0xba7c, self.epoch]));
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<Block> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.blocks[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }
}

pub fn make_batches(
    corpus: &Corpus,
    seq_len: usize,
    batch: usize,
    seed: u64,
) -> Result<BatchStream, TrainError> {
    if seq_len == 0 || batch == 0 {
        return Err(TrainError::InvalidConfig(
            "seq_len and batch must be positive".into(),
        ));
    }
    let blocks: Vec<Block> = corpus
        .docs()
        .iter()
        .enumerate()
        .flat_map(|(doc, toks)| {
            (0..toks.len() / seq_len).map(move |b| Block {
                doc,
                start: b * seq_len,
                len: seq_len,
            })
        })
        .collect();
    if blocks.is_empty() {
        return Err(TrainError::EmptyCorpus(seq_len));
    }
    let mut s = BatchStream {
        blocks,
        order: Vec::new(),
        cursor: 0,
        epoch: 0,
        batch,
        seed,
    };
    s.shuffle();
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub nll: f64,
}

/// `step,lr,nll` rows with a header line.
pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,lr,nll\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.lr, p.nll));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub curve: Vec<LossPoint>,
    pub checkpoints: Vec<PathBuf>,
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Mean loss and gradient over one batch. Per-sequence results are
/// reduced in batch order so the sum does not depend on scheduling.
fn batch_grads(
    model: &ModelState,
    corpus: &Corpus,
    aug: &Augmenter<'_>,
    blocks: &[Block],
    seed: u64,
    step: usize,
) -> Result<(f64, ModelParams), TrainError> {
    let parts = blocks
        .par_iter()
        .enumerate()
        .map(|(b, blk)| {
            let tokens: &[TokenId] = &corpus.doc(blk.doc)[blk.start..blk.start + blk.len];
            let images = aug.augment_span(corpus, blk.doc, blk.start, blk.len)?;
            let mut rng = rng_for(seed, &[0xd50, step as u64, b as u64]);
            Ok(model.loss_and_grads_train(tokens, &images, &mut rng)?)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("batch is non-empty");
    for (l, g) in iter {
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Trains `model` in place of a copy and returns the result with the
/// per-step loss curve. Checkpoints go to `checkpoint_dir` as
/// `step-<n>.ckpt` when a cadence is configured.
pub fn train(
    model: &ModelState,
    corpus: &Corpus,
    aug: &Augmenter<'_>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.seq_len > model.config.max_seq {
        return Err(TrainError::InvalidConfig(format!(
            "seq_len {} exceeds model max_seq {}",
            cfg.seq_len, model.config.max_seq
        )));
    }
    let mut model = model.clone();
    model.config.dropout = cfg.dropout;
    let mut stream = make_batches(corpus, cfg.seq_len, cfg.batch_size, cfg.seed)?;
    let mut adam = Adam {
        m: ModelParams::zeros(&model.config),
        v: ModelParams::zeros(&model.config),
        t: 0,
    };
    let mut curve = Vec::with_capacity(cfg.total_steps);
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.total_steps {
        let blocks = stream.next_batch();
        let (loss, mut grads) = batch_grads(&model, corpus, aug, &blocks, cfg.seed, step)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        if let Some(clip) = cfg.clip_norm {
            let norm = grads.sq_norm().sqrt();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut model.params, &grads, lr, cfg);
        curve.push(LossPoint {
            step,
            lr,
            nll: loss,
        });
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("step-{step}.ckpt"));
                model.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        checkpoints,
    })
}
