use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{gelu, layer_norm, linear, LnCache};
use super::{ModelState, ProjMode, RetrievedImageSet};
use crate::tokenizer::TokenId;

/// Activations of one layer from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    /// Residual stream after the layer, `T × E`.
    pub hidden: Vec<f64>,
    /// Attention probabilities per head. Row `i` of head `h` covers the
    /// text slots `0..=i` followed by the image slots of position `i`.
    pub attention: Vec<f64>,
    /// Row start offsets within one head's block (`T + 1` entries).
    pub row_offsets: Vec<usize>,
    /// Image slots seen by each query position.
    pub image_counts: Vec<usize>,
    pub n_heads: usize,
}

impl LayerActivations {
    fn head_block(&self) -> usize {
        *self.row_offsets.last().unwrap_or(&0)
    }

    /// Full softmax row for `(head, pos)`.
    pub fn attention_row(&self, head: usize, pos: usize) -> &[f64] {
        let base = head * self.head_block();
        &self.attention[base + self.row_offsets[pos]..base + self.row_offsets[pos + 1]]
    }

    /// Probability mass a query position puts on its image slots.
    pub fn image_mass(&self, head: usize, pos: usize) -> f64 {
        let row = self.attention_row(head, pos);
        row[pos + 1..].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `T × V` logits.
    pub logits: Vec<f64>,
    pub seq_len: usize,
    pub vocab: usize,
    pub layers: Vec<LayerActivations>,
}

impl ForwardOutput {
    pub fn logits_at(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }
}

pub(super) struct ImageCache {
    pub zn: Vec<f64>,
    pub ln: LnCache,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Prefix sums of per-position slot counts (`T + 1` entries).
    pub offsets: Vec<usize>,
}

pub(super) struct LayerCache {
    pub x_in: Vec<f64>,
    pub ln1: LnCache,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub image: Option<ImageCache>,
    pub row_off: Vec<usize>,
    pub probs: Vec<f64>,
    /// Dropout multipliers aligned with `probs` (0 or 1/(1-p)).
    pub keep: Option<Vec<f64>>,
    pub att: Vec<f64>,
    pub ln2: LnCache,
    pub b: Vec<f64>,
    pub hpre: Vec<f64>,
    pub hact: Vec<f64>,
}

pub(super) struct Cache {
    pub tokens: Vec<TokenId>,
    pub layers: Vec<LayerCache>,
    pub x_final: Vec<f64>,
    pub lnf: LnCache,
    pub xf: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Cache {
    pub fn into_output(self) -> ForwardOutput {
        let t = self.tokens.len();
        let vocab = self.logits.len() / t;
        let mut hidden: Vec<Vec<f64>> = self.layers.iter().skip(1).map(|l| l.x_in.clone()).collect();
        hidden.push(self.x_final);
        let layers = self
            .layers
            .into_iter()
            .zip(hidden)
            .map(|(lc, hidden)| {
                let image_counts = match &lc.image {
                    Some(img) => img.offsets.windows(2).map(|w| w[1] - w[0]).collect(),
                    None => vec![0; t],
                };
                let n_heads = lc.probs.len() / lc.row_off[t].max(1);
                LayerActivations {
                    hidden,
                    attention: lc.probs,
                    row_offsets: lc.row_off,
                    image_counts,
                    n_heads,
                }
            })
            .collect();
        ForwardOutput {
            logits: self.logits,
            seq_len: t,
            vocab,
            layers,
        }
    }
}

/// Image key/value projection parameters `(W^K, b^K, W^V, b^V)` for a layer.
pub(super) fn image_projection(model: &ModelState, layer: usize) -> [&[f64]; 4] {
    let p = &model.params.layers[layer];
    let f = &model.params.fusion;
    match model.config.proj_mode {
        ProjMode::SharedWeightsImageBias => [&p.wk, &f.bk_img, &p.wv, &f.bv_img],
        ProjMode::ImageSpecificWeightsAndBias => [&f.wk_img, &f.bk_img, &f.wv_img, &f.bv_img],
        ProjMode::SharedAll => [&p.wk, &p.bk, &p.wv, &p.bv],
    }
}

fn project_images(model: &ModelState, layer: usize, images: &RetrievedImageSet) -> ImageCache {
    let e = model.config.d_model;
    let mut offsets = Vec::with_capacity(images.len() + 1);
    offsets.push(0);
    let mut z = Vec::with_capacity(images.total() * e);
    for slots in images.positions() {
        for vec in &slots.vectors {
            z.extend_from_slice(vec);
        }
        offsets.push(offsets.last().unwrap() + slots.len());
    }
    let s = z.len() / e;
    let f = &model.params.fusion;
    let (zn, ln) = layer_norm(&z, &f.ln_img_gain, &f.ln_img_shift, e, model.config.ln_img_eps);
    let [wk, bk, wv, bv] = image_projection(model, layer);
    let k = linear(&zn, wk, bk, s, e, e);
    let v = linear(&zn, wv, bv, s, e, e);
    ImageCache {
        zn,
        ln,
        k,
        v,
        offsets,
    }
}

struct AttnOut {
    att: Vec<f64>,
    probs: Vec<f64>,
    keep: Option<Vec<f64>>,
    row_off: Vec<usize>,
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in row.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = 1.0 / sum;
    for s in row.iter_mut() {
        *s *= inv;
    }
}

fn dropout_mask(rng: Option<&mut ChaCha8Rng>, rate: f64, len: usize) -> Option<Vec<f64>> {
    let rng = rng?;
    let scale = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect(),
    )
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(out: &mut [f64], w: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += w * v;
    }
}

/// Multi-head causal self-attention over text slots only.
fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    e: usize,
    heads: usize,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> AttnOut {
    let d = e / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let row_off: Vec<usize> = (0..=t).map(|i| i * (i + 1) / 2).collect();
    let block = row_off[t];
    let mut probs = vec![0.0; heads * block];
    let mut att = vec![0.0; t * e];
    let (rng, rate) = match dropout {
        Some((rng, rate)) => (Some(rng), rate),
        None => (None, 0.0),
    };
    let keep = dropout_mask(rng, rate, heads * block);
    for h in 0..heads {
        let hs = h * d;
        for i in 0..t {
            let base = h * block + row_off[i];
            let qi = &q[i * e + hs..i * e + hs + d];
            let row = &mut probs[base..base + i + 1];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * e + hs..j * e + hs + d]) * scale;
            }
            softmax_in_place(row);
            let out = &mut att[i * e + hs..i * e + hs + d];
            for j in 0..=i {
                let w = match &keep {
                    Some(m) => probs[base + j] * m[base + j],
                    None => probs[base + j],
                };
                axpy(out, w, &v[j * e + hs..j * e + hs + d]);
            }
        }
    }
    AttnOut {
        att,
        probs,
        keep,
        row_off,
    }
}

/// Multi-head attention whose softmax for position `i` spans text slots
/// `0..=i` and the image slots of position `i` jointly.
#[allow(clippy::too_many_arguments)]
fn joint_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    img: &ImageCache,
    t: usize,
    e: usize,
    heads: usize,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> AttnOut {
    let d = e / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut row_off = Vec::with_capacity(t + 1);
    row_off.push(0);
    for i in 0..t {
        let n_img = img.offsets[i + 1] - img.offsets[i];
        row_off.push(row_off[i] + i + 1 + n_img);
    }
    let block = row_off[t];
    let mut probs = vec![0.0; heads * block];
    let mut att = vec![0.0; t * e];
    let (rng, rate) = match dropout {
        Some((rng, rate)) => (Some(rng), rate),
        None => (None, 0.0),
    };
    let keep = dropout_mask(rng, rate, heads * block);
    for h in 0..heads {
        let hs = h * d;
        for i in 0..t {
            let base = h * block + row_off[i];
            let len = row_off[i + 1] - row_off[i];
            let first_img = img.offsets[i];
            let qi = &q[i * e + hs..i * e + hs + d];
            let row = &mut probs[base..base + len];
            for (slot, s) in row.iter_mut().enumerate() {
                let key = if slot <= i {
                    &k[slot * e + hs..slot * e + hs + d]
                } else {
                    let r = first_img + slot - i - 1;
                    &img.k[r * e + hs..r * e + hs + d]
                };
                *s = dot(qi, key) * scale;
            }
            softmax_in_place(row);
            let out = &mut att[i * e + hs..i * e + hs + d];
            for slot in 0..len {
                let w = match &keep {
                    Some(m) => probs[base + slot] * m[base + slot],
                    None => probs[base + slot],
                };
                let val = if slot <= i {
                    &v[slot * e + hs..slot * e + hs + d]
                } else {
                    let r = first_img + slot - i - 1;
                    &img.v[r * e + hs..r * e + hs + d]
                };
                axpy(out, w, val);
            }
        }
    }
    AttnOut {
        att,
        probs,
        keep,
        row_off,
    }
}

/// Runs the network. With `images == None` the fusion layer behaves as an
/// ordinary decoder layer.
pub(super) fn run(
    model: &ModelState,
    tokens: &[TokenId],
    images: Option<&RetrievedImageSet>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Cache {
    let cfg = &model.config;
    let p = &model.params;
    let (t, e, f) = (tokens.len(), cfg.d_model, cfg.ffn_dim());
    let mut x = vec![0.0; t * e];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &p.tok_emb[tok as usize * e..(tok as usize + 1) * e];
        let pe = &p.pos_emb[i * e..(i + 1) * e];
        for ((o, a), b) in x[i * e..(i + 1) * e].iter_mut().zip(te).zip(pe) {
            *o = a + b;
        }
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in p.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_shift, e, cfg.ln_eps);
        let q = linear(&a, &lp.wq, &lp.bq, t, e, e);
        let k = linear(&a, &lp.wk, &lp.bk, t, e, e);
        let v = linear(&a, &lp.wv, &lp.bv, t, e, e);
        let image = match images {
            Some(imgs) if l == cfg.fusion_layer => Some(project_images(model, l, imgs)),
            _ => None,
        };
        let dropout = rng.as_deref_mut().map(|r| (r, cfg.dropout));
        let AttnOut {
            att,
            probs,
            keep,
            row_off,
        } = match &image {
            Some(img) => joint_attention(&q, &k, &v, img, t, e, cfg.n_heads, dropout),
            None => causal_attention(&q, &k, &v, t, e, cfg.n_heads, dropout),
        };
        let o = linear(&att, &lp.wo, &lp.bo, t, e, e);
        let x_mid: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (b, ln2) = layer_norm(&x_mid, &lp.ln2_gain, &lp.ln2_shift, e, cfg.ln_eps);
        let hpre = linear(&b, &lp.w1, &lp.b1, t, e, f);
        let hact: Vec<f64> = hpre.iter().map(|&h| gelu(h)).collect();
        let m = linear(&hact, &lp.w2, &lp.b2, t, f, e);
        let x_out: Vec<f64> = x_mid.iter().zip(&m).map(|(a, b)| a + b).collect();
        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            ln1,
            a,
            q,
            k,
            v,
            image,
            row_off,
            probs,
            keep,
            att,
            ln2,
            b,
            hpre,
            hact,
        });
    }
    let (xf, lnf) = layer_norm(&x, &p.lnf_gain, &p.lnf_shift, e, cfg.ln_eps);
    let logits = linear(&xf, &p.head_w, &p.head_b, t, e, cfg.vocab);
    Cache {
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        lnf,
        xf,
        logits,
    }
}
