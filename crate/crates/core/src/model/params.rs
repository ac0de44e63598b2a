use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ProjMode};
use crate::rng::rng_for;

/// Parameters of one pre-norm decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_shift: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_shift: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Image-side parameters of the fusion layer. Which tensors are non-empty
/// depends on the projection mode: `SharedAll` has only the image layer
/// norm, `SharedWeightsImageBias` adds the image key/value biases and
/// `ImageSpecificWeightsAndBias` adds image key/value weights too.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub ln_img_gain: Vec<f64>,
    pub ln_img_shift: Vec<f64>,
    pub bk_img: Vec<f64>,
    pub bv_img: Vec<f64>,
    pub wk_img: Vec<f64>,
    pub wv_img: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub fusion: FusionParams,
    pub lnf_gain: Vec<f64>,
    pub lnf_shift: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Fixed tensor order used by checkpoints, the optimizer and gradient
    /// checks.
    pub fn specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
        let e = cfg.d_model;
        let f = cfg.ffn_dim();
        let spec = |name: String, shape: &[usize]| TensorSpec {
            name,
            shape: shape.to_vec(),
        };
        let mut out = vec![
            spec("tok_emb".into(), &[cfg.vocab, e]),
            spec("pos_emb".into(), &[cfg.max_seq, e]),
        ];
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                spec(p("ln1_gain"), &[e]),
                spec(p("ln1_shift"), &[e]),
                spec(p("wq"), &[e, e]),
                spec(p("bq"), &[e]),
                spec(p("wk"), &[e, e]),
                spec(p("bk"), &[e]),
                spec(p("wv"), &[e, e]),
                spec(p("bv"), &[e]),
                spec(p("wo"), &[e, e]),
                spec(p("bo"), &[e]),
                spec(p("ln2_gain"), &[e]),
                spec(p("ln2_shift"), &[e]),
                spec(p("w1"), &[e, f]),
                spec(p("b1"), &[f]),
                spec(p("w2"), &[f, e]),
                spec(p("b2"), &[e]),
            ]);
        }
        let (bias, weight) = match cfg.proj_mode {
            ProjMode::SharedAll => (0, 0),
            ProjMode::SharedWeightsImageBias => (e, 0),
            ProjMode::ImageSpecificWeightsAndBias => (e, e),
        };
        out.extend([
            spec("fusion.ln_img_gain".into(), &[e]),
            spec("fusion.ln_img_shift".into(), &[e]),
            spec("fusion.bk_img".into(), &[bias]),
            spec("fusion.bv_img".into(), &[bias]),
            spec("fusion.wk_img".into(), &[weight, weight]),
            spec("fusion.wv_img".into(), &[weight, weight]),
            spec("lnf_gain".into(), &[e]),
            spec("lnf_shift".into(), &[e]),
            spec("head_w".into(), &[e, cfg.vocab]),
            spec("head_b".into(), &[cfg.vocab]),
        ]);
        out
    }

    /// All-zero tensors of the right shapes (gradient accumulators).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut tensors = Self::specs(cfg)
            .into_iter()
            .map(|s| vec![0.0; s.numel()]);
        let mut next = || tensors.next().expect("tensor spec list matches struct");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_gain: next(),
                ln1_shift: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_shift: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let fusion = FusionParams {
            ln_img_gain: next(),
            ln_img_shift: next(),
            bk_img: next(),
            bv_img: next(),
            wk_img: next(),
            wv_img: next(),
        };
        Self {
            tok_emb,
            pos_emb,
            layers,
            fusion,
            lnf_gain: next(),
            lnf_shift: next(),
            head_w: next(),
            head_b: next(),
        }
    }

    /// Scaled-normal init (std 0.02) for weight matrices and embeddings,
    /// unit layer-norm gains, zero biases. Image key/value biases start at
    /// zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (i, (spec, t)) in Self::specs(cfg).iter().zip(p.tensors_mut()).enumerate() {
            let leaf = spec.name.rsplit('.').next().unwrap_or(&spec.name);
            if leaf.ends_with("gain") {
                t.fill(1.0);
            } else if spec.shape.len() == 2 {
                let mut rng = rng_for(seed, &[0x1417, i as u64]);
                t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        p
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain,
                &l.ln1_shift,
                &l.wq,
                &l.bq,
                &l.wk,
                &l.bk,
                &l.wv,
                &l.bv,
                &l.wo,
                &l.bo,
                &l.ln2_gain,
                &l.ln2_shift,
                &l.w1,
                &l.b1,
                &l.w2,
                &l.b2,
            ]);
        }
        let f = &self.fusion;
        out.extend([
            &f.ln_img_gain,
            &f.ln_img_shift,
            &f.bk_img,
            &f.bv_img,
            &f.wk_img,
            &f.wv_img,
            &self.lnf_gain,
            &self.lnf_shift,
            &self.head_w,
            &self.head_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_shift,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gain,
                &mut l.ln2_shift,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        let f = &mut self.fusion;
        out.extend([
            &mut f.ln_img_gain,
            &mut f.ln_img_shift,
            &mut f.bk_img,
            &mut f.bv_img,
            &mut f.wk_img,
            &mut f.wv_img,
            &mut self.lnf_gain,
            &mut self.lnf_shift,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
