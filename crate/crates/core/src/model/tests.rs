use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::rng::{gaussian_vec, rng_for};

const MODES: [ProjMode; 3] = [
    ProjMode::SharedWeightsImageBias,
    ProjMode::ImageSpecificWeightsAndBias,
    ProjMode::SharedAll,
];

fn perturbed(cfg: ModelConfig, seed: u64, std: f64) -> ModelState {
    let mut m = ModelState::new(cfg, seed).unwrap();
    let normal = Normal::new(0.0, std).unwrap();
    let mut rng = rng_for(seed, &[99]);
    for t in m.params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    m
}

fn random_images(cfg: &ModelConfig, t: usize, seed: u64, full: bool) -> RetrievedImageSet {
    let mut rng = rng_for(seed, &[7]);
    let slots = (0..t)
        .map(|_| {
            let n = if full {
                cfg.num_images
            } else {
                rng.random_range(0..=cfg.num_images)
            };
            ImageSlots {
                ids: (0..n as u64).collect(),
                scores: vec![0.0; n],
                vectors: (0..n).map(|_| gaussian_vec(&mut rng, cfg.d_model)).collect(),
            }
        })
        .collect();
    RetrievedImageSet::from_slots(slots)
}

fn tokens(cfg: &ModelConfig, t: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = rng_for(seed, &[3]);
    (0..t).map(|_| rng.random_range(0..cfg.vocab as u32)).collect()
}

#[test]
fn gradients_match_central_differences() {
    for mode in MODES {
        let cfg = ModelConfig {
            proj_mode: mode,
            ..ModelConfig::tiny(9, 2)
        };
        let m = perturbed(cfg, 11, 0.2);
        let toks = tokens(&cfg, 6, 1);
        let imgs = random_images(&cfg, 6, 2, false);
        let (_, grads) = m.loss_and_grads(&toks, &imgs).unwrap();
        let h = 1e-4;
        let specs = ModelParams::specs(&cfg);
        for (ti, spec) in specs.iter().enumerate() {
            for idx in 0..spec.numel() {
                let mut plus = m.clone();
                plus.params.tensors_mut()[ti][idx] += h;
                let mut minus = m.clone();
                minus.params.tensors_mut()[ti][idx] -= h;
                let fd = (plus.nll(&toks, &imgs).unwrap() - minus.nll(&toks, &imgs).unwrap())
                    / (2.0 * h);
                let an = grads.tensors()[ti][idx];
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                assert!(
                    err < 1e-4 || (fd - an).abs() < 1e-9,
                    "{:?} {}[{idx}]: analytic {an} numeric {fd}",
                    mode,
                    spec.name
                );
            }
        }
    }
}

#[test]
fn zero_images_match_plain_decoder_bitwise() {
    for mode in MODES {
        let cfg = ModelConfig {
            proj_mode: mode,
            ..ModelConfig::tiny(9, 3)
        };
        let m = perturbed(cfg, 4, 0.1);
        let toks = tokens(&cfg, 10, 5);
        let fused = m.forward(&toks, &RetrievedImageSet::empty(10)).unwrap();
        let plain = m.forward_plain(&toks).unwrap();
        assert_eq!(fused.logits, plain.logits);
    }
}

#[test]
fn image_bias_grads_vanish_without_images() {
    let cfg = ModelConfig {
        proj_mode: ProjMode::ImageSpecificWeightsAndBias,
        ..ModelConfig::tiny(9, 3)
    };
    let m = perturbed(cfg, 4, 0.1);
    let toks = tokens(&cfg, 8, 5);
    let (_, g) = m.loss_and_grads(&toks, &RetrievedImageSet::empty(8)).unwrap();
    let f = &g.fusion;
    for t in [&f.bk_img, &f.bv_img, &f.wk_img, &f.wv_img, &f.ln_img_gain, &f.ln_img_shift] {
        assert!(t.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn joint_softmax_rows_sum_to_one() {
    let cfg = ModelConfig::tiny(9, 4);
    let m = perturbed(cfg, 8, 0.5);
    let toks = tokens(&cfg, 12, 9);
    let imgs = random_images(&cfg, 12, 10, false);
    let out = m.forward(&toks, &imgs).unwrap();
    let fl = &out.layers[cfg.fusion_layer];
    for h in 0..cfg.n_heads {
        for i in 0..12 {
            let row = fl.attention_row(h, i);
            assert_eq!(row.len(), i + 1 + imgs.count(i));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn images_change_only_positions_that_see_them() {
    let cfg = ModelConfig::tiny(9, 2);
    let m = perturbed(cfg, 8, 0.3);
    let toks = tokens(&cfg, 8, 9);
    let mut imgs = RetrievedImageSet::empty(8);
    imgs.set(5, random_images(&cfg, 1, 3, true).slots(0).clone());
    let with = m.forward(&toks, &imgs).unwrap();
    let without = m.forward_plain(&toks).unwrap();
    for pos in 0..8 {
        let same = with.logits_at(pos) == without.logits_at(pos);
        assert_eq!(same, pos < 5, "position {pos}");
    }
}

#[test]
fn zero_head_gives_uniform_nll() {
    let cfg = ModelConfig::tiny(17, 2);
    let mut m = ModelState::new(cfg, 1).unwrap();
    m.params.head_w.fill(0.0);
    let toks = tokens(&cfg, 9, 2);
    let nll = m.nll(&toks, &random_images(&cfg, 9, 3, false)).unwrap();
    assert!((nll - (17f64).ln()).abs() < 1e-12);
}

#[test]
fn next_token_logprobs_normalize() {
    let cfg = ModelConfig::tiny(9, 2);
    let m = perturbed(cfg, 2, 0.3);
    let toks = tokens(&cfg, 5, 2);
    let lp = m
        .next_token_logprobs(&toks, &random_images(&cfg, 5, 1, false))
        .unwrap();
    assert!(lp.iter().all(|&v| v <= 0.0));
    assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn dropout_is_seeded_and_only_used_in_training() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..ModelConfig::tiny(9, 2)
    };
    let m = perturbed(cfg, 2, 0.3);
    let toks = tokens(&cfg, 8, 2);
    let imgs = random_images(&cfg, 8, 1, false);
    let (clean, _) = m.loss_and_grads(&toks, &imgs).unwrap();
    assert_eq!(clean, m.nll(&toks, &imgs).unwrap());
    let (a, ga) = m.loss_and_grads_train(&toks, &imgs, &mut rng_for(1, &[])).unwrap();
    let (b, gb) = m.loss_and_grads_train(&toks, &imgs, &mut rng_for(1, &[])).unwrap();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
    assert_ne!(a, clean);
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = ModelConfig::tiny(9, 1);
    let m = ModelState::new(cfg, 0).unwrap();
    assert!(matches!(
        m.forward(&[1, 2], &RetrievedImageSet::empty(3)),
        Err(ModelError::ShapeMismatch(_))
    ));
    assert!(matches!(
        m.forward(&[1, 9], &RetrievedImageSet::empty(2)),
        Err(ModelError::ShapeMismatch(_))
    ));
    assert!(matches!(
        m.forward(&[0; 17], &RetrievedImageSet::empty(17)),
        Err(ModelError::ShapeMismatch(_))
    ));
    let mut imgs = random_images(&cfg, 2, 0, true);
    let mut slot = imgs.slots(1).clone();
    slot.vectors[0][3] = f64::NAN;
    imgs.set(1, slot);
    assert!(matches!(m.forward(&[1, 2], &imgs), Err(ModelError::NonFiniteInput(_))));
    let too_many = random_images(&ModelConfig::tiny(9, 2), 2, 0, true);
    assert!(matches!(m.forward(&[1, 2], &too_many), Err(ModelError::ShapeMismatch(_))));
    let bad = ModelConfig {
        n_heads: 3,
        ..cfg
    };
    assert!(matches!(ModelState::new(bad, 0), Err(ModelError::InvalidConfig(_))));
}
