//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.
//!
//! Run with `cargo test -p valm-core --test acceptance -- --nocapture`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use valm_core::augment::{
    counterfactual_swap, generate_grounded_corpus, slots_from_hits, Augmenter, AugmentationPlan,
    GroundedCorpus, GroundedCorpusSpec, RetrievalCache, RetrievalMode, Retriever, PROMPT_TEMPLATES,
};
use valm_core::corpus::Corpus;
use valm_core::encoder::{encode_image_key, EmbeddingTable, ImageRecord, SyntheticEncoder};
use valm_core::evalkit::{eval_object_task, perplexity, EvalItem, PromptSpec};
use valm_core::model::{
    ImageSlots, ModelConfig, ModelParams, ModelState, ProjMode, RetrievedImageSet,
};
use valm_core::rng::{gaussian_vec, rng_for, unit_gaussian};
use valm_core::tokenizer::{default_stop_set, TokenId, Tokenizer};
use valm_core::trainer::{train, TrainConfig};
use valm_core::vindex::{
    brute_force_search, recall_at_k, train_index, CodeMode, IndexParams, IvfPqIndex,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const MODES: [ProjMode; 3] = [
    ProjMode::SharedWeightsImageBias,
    ProjMode::ImageSpecificWeightsAndBias,
    ProjMode::SharedAll,
];

fn random_images(cfg: &ModelConfig, t: usize, rng: &mut impl Rng) -> RetrievedImageSet {
    let mut rng = rng_for(rng.random(), &[]);
    RetrievedImageSet::from_slots(
        (0..t)
            .map(|_| {
                let n = rng.random_range(0..=cfg.num_images);
                ImageSlots {
                    ids: (0..n as u64).collect(),
                    scores: vec![0.0; n],
                    vectors: (0..n).map(|_| gaussian_vec(&mut rng, cfg.d_model)).collect(),
                }
            })
            .collect(),
    )
}

fn random_tokens(cfg: &ModelConfig, t: usize, rng: &mut impl Rng) -> Vec<TokenId> {
    (0..t).map(|_| rng.random_range(0..cfg.vocab as u32)).collect()
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let h = 1e-4;
    // Denominator floor for near-zero gradients.
    let floor = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut checked = 0usize;
    for (mi, mode) in MODES.into_iter().enumerate() {
        let cfg = ModelConfig {
            num_images: 2,
            proj_mode: mode,
            ..ModelConfig::new(2, 2, 32, 20, 16)
        };
        let mut m = ModelState::new(cfg, 40 + mi as u64).unwrap();
        let normal = Normal::new(0.0, 0.2).unwrap();
        let mut rng = rng_for(41, &[mi as u64]);
        for t in m.params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let toks = random_tokens(&cfg, 16, &mut rng);
        let imgs = random_images(&cfg, 16, &mut rng);
        let (_, grads) = m.loss_and_grads(&toks, &imgs).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().cloned().collect();
        for (ti, an) in analytic.iter().enumerate() {
            for (idx, &a) in an.iter().enumerate() {
                let orig = m.params.tensors()[ti][idx];
                m.params.tensors_mut()[ti][idx] = orig + h;
                let plus = m.nll(&toks, &imgs).unwrap();
                m.params.tensors_mut()[ti][idx] = orig - h;
                let minus = m.nll(&toks, &imgs).unwrap();
                m.params.tensors_mut()[ti][idx] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(floor);
                worst = worst.max(rel);
                worst_abs = worst_abs.max((fd - a).abs());
                checked += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 60.0,
        format!(
            "{checked} entries over 3 projection modes, max rel err {worst:.2e}, max abs err {worst_abs:.2e}, {secs:.1}s"
        ),
    )
}

fn reduction_invariant() -> Outcome {
    let mut rng = rng_for(50, &[]);
    for (mi, mode) in MODES.into_iter().enumerate() {
        let cfg = ModelConfig {
            num_images: 4,
            proj_mode: mode,
            ..ModelConfig::new(3, 4, 32, 30, 24)
        };
        let m = ModelState::new(cfg, 51 + mi as u64).unwrap();
        for _ in 0..5 {
            let toks = random_tokens(&cfg, 24, &mut rng);
            let a = m.forward(&toks, &RetrievedImageSet::empty(24)).unwrap().logits;
            let b = m.forward_plain(&toks).unwrap().logits;
            let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(format!("{} logits differ", mode.as_str()));
            }
        }
    }
    Ok("K=0 logits bit-identical to the plain decoder in all projection modes".into())
}

fn softmax_normalization() -> Outcome {
    let mut rng = rng_for(60, &[]);
    let mut worst = 0.0f64;
    for run in 0..100 {
        let cfg = ModelConfig {
            num_images: 4,
            proj_mode: MODES[run % 3],
            ..ModelConfig::new(2, 4, 32, 25, 20)
        };
        let m = ModelState::new(cfg, run as u64).unwrap();
        let t = rng.random_range(1..=20);
        let toks = random_tokens(&cfg, t, &mut rng);
        let imgs = random_images(&cfg, t, &mut rng);
        let out = m.forward(&toks, &imgs).unwrap();
        for layer in &out.layers {
            for head in 0..layer.n_heads {
                for pos in 0..t {
                    let s: f64 = layer.attention_row(head, pos).iter().sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
    }
    check(worst < 1e-6, format!("100 forwards, max |row sum - 1| = {worst:.2e}"))
}

/// Keys in groups of four noisy views around shared directions, the shape
/// of an image knowledge base with several images per concept.
fn grouped_keys(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let mut rng = rng_for(seed, &[]);
    let concepts: Vec<Vec<f64>> = (0..n / 4).map(|_| unit_gaussian(&mut rng, dim)).collect();
    let view = |c: &[f64], rng: &mut _| {
        let noise = unit_gaussian(rng, dim);
        let mut v: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + 0.5 * b).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v.into_iter().map(|x| x as f32).collect::<Vec<f32>>()
    };
    let keys = concepts.iter().flat_map(|c| (0..4).map(|_| view(c, &mut rng)).collect::<Vec<_>>()).collect();
    let queries = (0..100)
        .map(|_| {
            let c = &concepts[rng.random_range(0..concepts.len())];
            view(c, &mut rng)
        })
        .collect();
    (keys, queries)
}

fn build_index(keys: &[Vec<f32>], codes: CodeMode) -> IvfPqIndex {
    let mut idx = train_index(
        keys,
        IndexParams {
            dim: 64,
            n_centroids: 256,
            codes,
            kmeans_iters: 20,
            seed: 7,
        },
    )
    .unwrap();
    idx.add_keys(keys.iter().enumerate().map(|(i, k)| (i as u64, &k[..]))).unwrap();
    idx
}

fn index_oracle() -> Outcome {
    let (keys, queries) = grouped_keys(10_000, 64, 70);
    let store = || keys.iter().enumerate().map(|(i, k)| (i as u64, &k[..]));
    let exact_idx = build_index(&keys, CodeMode::Exact);
    for q in &queries {
        let want = brute_force_search(store(), q, 4);
        let got = exact_idx.search(q, 4, 256).unwrap();
        if got.ids != want.ids {
            return Err(format!("exact mode ids {:?} vs brute force {:?}", got.ids, want.ids));
        }
    }
    let pq = build_index(&keys, CodeMode::Pq { m: 8 });
    let recall = |nprobe: usize| {
        queries
            .iter()
            .map(|q| recall_at_k(&brute_force_search(store(), q, 4), &pq.search(q, 4, nprobe).unwrap()))
            .sum::<f64>()
            / queries.len() as f64
    };
    let r32 = recall(32);
    let curve: Vec<f64> = [1, 4, 16, 64, 256].into_iter().map(recall).collect();
    let monotone = curve.windows(2).all(|w| w[1] >= w[0]);
    check(
        r32 >= 0.9 && monotone,
        format!("exact == brute force on 100 queries; PQ recall@4 {r32:.3} at nprobe 32; by nprobe {curve:.3?}"),
    )
}

struct Grounding {
    corpus: GroundedCorpus,
    enc: SyntheticEncoder,
    keys: EmbeddingTable,
    index: IvfPqIndex,
    model: ModelState,
}

impl Grounding {
    fn retriever(&self) -> Retriever<'_> {
        Retriever::new(&self.enc, &self.index, &self.keys, default_stop_set(&self.corpus.tokenizer)).unwrap()
    }

    fn plan(&self) -> AugmentationPlan {
        AugmentationPlan::new(RetrievalMode::Retrieve, 4, 8, 0)
    }

    fn prompts(&self) -> Vec<PromptSpec> {
        PROMPT_TEMPLATES
            .iter()
            .map(|t| PromptSpec {
                task: "color".into(),
                template: t.replace(" [LABEL] .", ""),
                labels: self.corpus.attribute_words.clone(),
            })
            .collect()
    }

    fn test_items(&self) -> Vec<EvalItem> {
        self.corpus
            .test_items
            .iter()
            .map(|it| EvalItem {
                slots: [("ITEM".to_string(), it.object.clone())].into(),
                gold: self.corpus.attribute_word(it.attribute).to_string(),
            })
            .collect()
    }
}

fn train_grounded() -> Grounding {
    let corpus = generate_grounded_corpus(GroundedCorpusSpec::default()).unwrap();
    let enc = corpus.encoder(64, 1).unwrap();
    let keys = corpus.key_table(&enc).unwrap();
    let sample: Vec<Vec<f32>> = keys.iter().map(|(_, v)| v.to_vec()).collect();
    let mut index = train_index(
        &sample,
        IndexParams {
            dim: 64,
            n_centroids: 32,
            codes: CodeMode::Pq { m: 8 },
            kmeans_iters: 20,
            seed: 1,
        },
    )
    .unwrap();
    index.add_keys(keys.iter()).unwrap();
    let docs = Corpus::new(vec![corpus.train_tokens()]);
    let cfg = ModelConfig {
        num_images: 4,
        ..ModelConfig::new(2, 4, 64, corpus.tokenizer.vocab_size(), 64)
    };
    let init = ModelState::new(cfg, 7).unwrap();
    let mut g = Grounding {
        corpus,
        enc,
        keys,
        index,
        model: init,
    };
    let cache = RetrievalCache::build(&docs, &g.plan(), &g.retriever()).unwrap();
    let aug = Augmenter::cached(g.plan(), &cache, &g.keys, Some(g.retriever())).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        warmup_steps: 100,
        total_steps: 2000,
        batch_size: 4,
        seq_len: 64,
        seed: 3,
        ..Default::default()
    };
    let out = train(&g.model, &docs, &aug, &tc, None).unwrap();
    g.model = out.model;
    g
}

fn grounding(g: &Grounding, secs: f64) -> Outcome {
    let live = Augmenter::live(g.plan(), g.retriever()).unwrap();
    let random = Augmenter::random(AugmentationPlan::new(RetrievalMode::Random, 4, 8, 5), &g.keys).unwrap();
    let disabled = Augmenter::disabled();
    let (prompts, items) = (g.prompts(), g.test_items());
    let acc = |aug: &Augmenter<'_>| {
        eval_object_task(&g.model, aug, &g.corpus.tokenizer, &prompts, &items)
            .unwrap()
            .mean_accuracy
    };
    let (ret, dis, rnd) = (acc(&live), acc(&disabled), acc(&random));
    // Noise band over test objects.
    let chance = 1.0 / g.corpus.spec.n_attributes as f64;
    let n = items.len() as f64;
    let band = 2.576 * (chance * (1.0 - chance) / n).sqrt();
    check(
        ret - dis >= 0.30 && (dis - chance).abs() <= band && rnd < ret,
        format!(
            "held-out accuracy retrieve {ret:.3}, disabled {dis:.3} (chance {chance:.3} ± {band:.3}), random {rnd:.3}; trained in {secs:.0}s"
        ),
    )
}

fn counterfactual(g: &Grounding) -> Outcome {
    let live = Augmenter::live(g.plan(), g.retriever()).unwrap();
    let r = g.retriever();
    let tok = &g.corpus.tokenizer;
    let n_attr = g.corpus.spec.n_attributes as u32;
    let label_ids: Vec<TokenId> = g.corpus.attribute_words.iter().map(|w| tok.encode(w)[0]).collect();
    let prompt = PROMPT_TEMPLATES[0].replace(" [LABEL] .", "");
    let mut flipped = 0usize;
    for it in &g.corpus.test_items {
        let seq = tok.encode(&prompt.replace("[ITEM]", &it.object));
        let last = seq.len() - 1;
        let imgs = live.augment_positions(&seq).unwrap();
        let target = (it.attribute + 1) % n_attr;
        let query = encode_image_key(
            &g.enc,
            &ImageRecord {
                id: g.corpus.image_id(&it.object, target),
                object: g.corpus.object_token(&it.object),
                attribute: target,
            },
        )
        .unwrap();
        let hits = r.index.search(&query, 4, 8).unwrap();
        let pairs: Vec<(u64, f32)> = hits.ids.iter().copied().zip(hits.scores.iter().copied()).collect();
        let replacement = slots_from_hits(&g.keys, &pairs).unwrap();
        let swapped = counterfactual_swap(&imgs, last, replacement, 4).unwrap();
        let lp = g.model.next_token_logprobs(&seq, &swapped).unwrap();
        let best = (0..n_attr as usize)
            .max_by(|&a, &b| lp[label_ids[a] as usize].total_cmp(&lp[label_ids[b] as usize]).then(b.cmp(&a)))
            .unwrap();
        flipped += usize::from(best as u32 == target);
    }
    let share = flipped as f64 / g.corpus.test_items.len() as f64;
    check(
        share >= 0.9,
        format!("{flipped}/{} test objects flip to the swapped attribute ({share:.3})", g.corpus.test_items.len()),
    )
}

fn overfit() -> Outcome {
    let corpus = generate_grounded_corpus(GroundedCorpusSpec {
        n_objects: 20,
        n_attributes: 8,
        n_sentences: 50,
        test_fraction: 0.5,
        seed: 11,
    })
    .unwrap();
    let enc = corpus.encoder(64, 1).unwrap();
    let keys = corpus.key_table(&enc).unwrap();
    let sample: Vec<Vec<f32>> = keys.iter().map(|(_, v)| v.to_vec()).collect();
    let mut index = train_index(
        &sample,
        IndexParams {
            dim: 64,
            n_centroids: 8,
            codes: CodeMode::Exact,
            kmeans_iters: 10,
            seed: 1,
        },
    )
    .unwrap();
    index.add_keys(keys.iter()).unwrap();
    let toks = corpus.train_tokens();
    let docs = Corpus::new(vec![toks.clone()]);
    let retriever = Retriever::new(&enc, &index, &keys, default_stop_set(&corpus.tokenizer)).unwrap();
    let aug = Augmenter::live(AugmentationPlan::new(RetrievalMode::Retrieve, 2, 8, 0), retriever).unwrap();
    let v = corpus.tokenizer.vocab_size();
    let cfg = ModelConfig {
        num_images: 2,
        ..ModelConfig::new(2, 4, 64, v, toks.len())
    };
    let tc = TrainConfig {
        lr: 3e-3,
        warmup_steps: 50,
        total_steps: 500,
        batch_size: 1,
        seq_len: toks.len(),
        seed: 3,
        ..Default::default()
    };
    let out = train(&ModelState::new(cfg, 7).unwrap(), &docs, &aug, &tc, None).unwrap();
    let last = out.curve.last().unwrap().nll;
    let ppl = perplexity(&out.model, &aug, &docs).unwrap().perplexity;

    let imgs = aug.augment_positions(&toks).unwrap();
    let logits = out.model.forward(&toks, &imgs).unwrap();
    let hits = (0..toks.len() - 1)
        .filter(|&i| {
            let row = logits.logits_at(i);
            let arg = (0..v).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            arg as TokenId == toks[i + 1]
        })
        .count();
    let argmax_share = hits as f64 / (toks.len() - 1) as f64;

    let mut uniform = out.model.clone();
    uniform.params = ModelParams::zeros(&cfg);
    let uppl = perplexity(&uniform, &aug, &docs).unwrap().perplexity;
    let uniform_ok = (uppl - v as f64).abs() <= 1e-9 * v as f64;
    check(
        last < 0.1 && ppl < 1.2 && argmax_share >= 0.95 && uniform_ok,
        format!(
            "{} tokens: final nll {last:.4}, ppl {ppl:.4}, argmax match {argmax_share:.3}, uniform ppl {uppl} (V={v})",
            toks.len()
        ),
    )
}

fn determinism(g: &Grounding) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let sample: Vec<Vec<f32>> = g.keys.iter().map(|(_, v)| v.to_vec()).collect();
    let rebuilt = {
        let mut idx = train_index(&sample, g.index.params()).unwrap();
        idx.add_keys(g.keys.iter()).unwrap();
        idx
    };
    let index_bytes = g.index.to_bytes().unwrap();
    if rebuilt.to_bytes().unwrap() != index_bytes {
        return Err("index rebuild differs".into());
    }
    let path = dir.path().join("kb.index");
    g.index.save(&path).unwrap();
    let loaded = IvfPqIndex::load(&path).unwrap();
    let mut rng = rng_for(80, &[]);
    for _ in 0..50 {
        let q: Vec<f32> = unit_gaussian(&mut rng, 64).into_iter().map(|x| x as f32).collect();
        if loaded.search(&q, 4, 8).unwrap() != g.index.search(&q, 4, 8).unwrap() {
            return Err("index search differs after round-trip".into());
        }
    }

    let docs = Corpus::new(vec![g.corpus.train_tokens()[..4000].to_vec()]);
    let cache = RetrievalCache::build(&docs, &g.plan(), &g.retriever()).unwrap();
    let again = RetrievalCache::build(&docs, &g.plan(), &g.retriever()).unwrap();
    if cache.to_bytes() != again.to_bytes() {
        return Err("cache rebuild differs".into());
    }
    let path = dir.path().join("kb.cache");
    cache.save(&path).unwrap();
    let cache_back = RetrievalCache::load(&path).unwrap();
    if cache_back != cache {
        return Err("cache differs after round-trip".into());
    }

    let cfg = ModelConfig {
        num_images: 4,
        dropout: 0.1,
        ..ModelConfig::new(2, 4, 64, g.corpus.tokenizer.vocab_size(), 32)
    };
    let tc = TrainConfig {
        total_steps: 20,
        warmup_steps: 5,
        batch_size: 2,
        seq_len: 32,
        dropout: 0.1,
        seed: 9,
        checkpoint_every: 10,
        ..Default::default()
    };
    let init = ModelState::new(cfg, 8).unwrap();
    let run = |sub: &str| {
        let aug = Augmenter::cached(g.plan(), &cache_back, &g.keys, None).unwrap();
        let ckdir = dir.path().join(sub);
        std::fs::create_dir_all(&ckdir).unwrap();
        let out = train(&init, &docs, &aug, &tc, Some(&ckdir)).unwrap();
        let files: Vec<Vec<u8>> = out.checkpoints.iter().map(|p| std::fs::read(p).unwrap()).collect();
        (out, files)
    };
    let (a, files_a) = run("a");
    let (b, files_b) = run("b");
    if a.curve != b.curve || files_a.is_empty() || files_a != files_b {
        return Err("training is not reproducible".into());
    }
    if a.model.to_checkpoint_bytes() != b.model.to_checkpoint_bytes() {
        return Err("final checkpoints differ".into());
    }
    let path = dir.path().join("final.ckpt");
    a.model.save(&path).unwrap();
    let back = ModelState::load(&path).unwrap();
    let toks = &docs.doc(0)[..32];
    let live = Augmenter::live(g.plan(), g.retriever()).unwrap();
    let imgs = live.augment_positions(toks).unwrap();
    let x = a.model.forward(toks, &imgs).unwrap().logits;
    let y = back.forward(toks, &imgs).unwrap().logits;
    if back.to_checkpoint_bytes() != a.model.to_checkpoint_bytes()
        || x.iter().zip(&y).any(|(p, q)| p.to_bits() != q.to_bits())
    {
        return Err("checkpoint round-trip changes the model".into());
    }
    Ok(format!(
        "index, cache ({} records), {} checkpoints and loss curves reproduce byte-for-byte; round-trips are bit-identical",
        cache.len(),
        files_a.len()
    ))
}

fn run(results: &mut Vec<bool>, name: &str, f: impl FnOnce() -> Outcome) {
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let (tag, msg) = match &outcome {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("{tag} {name}: {msg}");
    results.push(outcome.is_ok());
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    run(&mut results, "1 gradient check", gradient_check);
    run(&mut results, "2 reduction to plain decoder", reduction_invariant);
    run(&mut results, "3 joint softmax normalization", softmax_normalization);
    run(&mut results, "4 index oracles", index_oracle);
    let t0 = Instant::now();
    let grounded = catch_unwind(train_grounded).ok();
    let secs = t0.elapsed().as_secs_f64();
    match &grounded {
        Some(g) => {
            run(&mut results, "5 grounding", || grounding(g, secs));
            run(&mut results, "6 counterfactual probe", || counterfactual(g));
        }
        None => {
            for name in ["5 grounding", "6 counterfactual probe"] {
                run(&mut results, name, || Err("grounded training failed".into()));
            }
        }
    }
    run(&mut results, "7 overfit sanity", overfit);
    match &grounded {
        Some(g) => run(&mut results, "8 determinism and persistence", || determinism(g)),
        None => run(&mut results, "8 determinism and persistence", || Err("grounded setup failed".into())),
    }
    let failed = results.iter().filter(|ok| !**ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
