use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;

use valm_core::augment::{
    generate_grounded_corpus, AugmentationPlan, Augmenter, GroundedCorpusSpec, RetrievalCache,
    RetrievalMode, Retriever, PROMPT_TEMPLATES,
};
use valm_core::corpus::Corpus;
use valm_core::encoder::{EmbeddingTable, JointEncoder, PrecomputedEncoder};
use valm_core::evalkit::{
    bench_retrieval_overhead, eval_object_task, items_to_jsonl, last_word_accuracy,
    parse_items_jsonl, parse_prompts_jsonl, perplexity, prompts_to_jsonl, score_solutions_piqa,
    EvalItem, PromptSpec,
};
use valm_core::io::atomic_write;
use valm_core::model::{ModelConfig, ModelState, ProjMode};
use valm_core::tokenizer::{default_stop_set, Tokenizer, WordTokenizer};
use valm_core::trainer::{loss_curve_csv, train, TrainConfig};
use valm_core::vindex::{train_index, CodeMode, IndexParams, IvfPqIndex};

use crate::config::{config_error, RunConfig};

/// Atomically writes `bytes`, creating parent directories first.
fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    atomic_write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn grounded_spec(cfg: &RunConfig) -> Result<GroundedCorpusSpec> {
    Ok(GroundedCorpusSpec {
        n_objects: cfg.get("objects")?,
        n_attributes: cfg.get("attributes")?,
        n_sentences: cfg.get("sentences")?,
        test_fraction: cfg.get("test_fraction")?,
        seed: cfg.get("corpus_seed")?,
    })
}

fn plan(cfg: &RunConfig) -> Result<AugmentationPlan> {
    let mode: RetrievalMode = cfg.get("mode")?;
    let mut plan = AugmentationPlan::new(mode, cfg.get("k")?, cfg.get("nprobe")?, cfg.get("seed")?);
    plan.stride = cfg.get("stride")?;
    plan.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(plan)
}

/// Tokenizer, key store and query encoder shared by the retrieval commands.
struct World {
    tok: WordTokenizer,
    keys: EmbeddingTable,
    encoder: Box<dyn JointEncoder>,
}

/// Input paths a [`World`] needs, checked before any work.
fn world_inputs(cfg: &RunConfig) -> Result<()> {
    cfg.input("vocab")?;
    cfg.input("keys")?;
    if cfg.raw("encoder") == "precomputed" {
        cfg.input("text_emb")?;
    }
    Ok(())
}

fn load_world(cfg: &RunConfig) -> Result<World> {
    let vocab = read_text(&cfg.input("vocab")?)?;
    let tok = WordTokenizer::from_vocab_text(&vocab);
    let keys = EmbeddingTable::load(&cfg.input("keys")?)?;
    let encoder: Box<dyn JointEncoder> = match cfg.raw("encoder") {
        "synthetic" => {
            let world = generate_grounded_corpus(grounded_spec(cfg)?)
                .map_err(|e| config_error(e.to_string()))?;
            if world.tokenizer.to_vocab_text() != tok.to_vocab_text() {
                return Err(config_error(
                    "vocab does not match the corpus-generation settings of the synthetic encoder",
                ));
            }
            Box::new(world.encoder(cfg.get("encoder_dim")?, cfg.get("encoder_seed")?)?)
        }
        "precomputed" => Box::new(PrecomputedEncoder::new(
            keys.clone(),
            EmbeddingTable::load(&cfg.input("text_emb")?)?,
            cfg.get("max_chunk")?,
        )?),
        other => return Err(config_error(format!("unknown encoder '{other}'"))),
    };
    if encoder.dim() != keys.dim() {
        return Err(config_error(format!(
            "encoder width {} differs from key width {}",
            encoder.dim(),
            keys.dim()
        )));
    }
    Ok(World { tok, keys, encoder })
}

fn load_corpus(path: &Path, tok: &dyn Tokenizer) -> Result<Corpus> {
    let corpus = Corpus::from_text(&read_text(path)?, tok);
    if corpus.n_tokens() == 0 {
        return Err(config_error(format!("{} holds no text", path.display())));
    }
    Ok(corpus)
}

pub fn gen_corpus(cfg: &RunConfig) -> Result<()> {
    if cfg.raw("encoder") != "synthetic" {
        return Err(config_error("gen-corpus needs encoder = synthetic"));
    }
    let world = generate_grounded_corpus(grounded_spec(cfg)?).map_err(|e| config_error(e.to_string()))?;
    let enc = world.encoder(cfg.get("encoder_dim")?, cfg.get("encoder_seed")?)?;
    let keys = world.key_table(&enc)?;
    let prompts: Vec<PromptSpec> = PROMPT_TEMPLATES
        .iter()
        .map(|t| PromptSpec {
            task: "attribute".into(),
            template: t.replace(" [LABEL] .", ""),
            labels: world.attribute_words.clone(),
        })
        .collect();
    let items: Vec<EvalItem> = world
        .test_items
        .iter()
        .map(|it| EvalItem {
            slots: [("ITEM".to_string(), it.object.clone())].into(),
            gold: world.attribute_word(it.attribute).to_string(),
        })
        .collect();
    write_out(&cfg.path("corpus"), world.train_text.as_bytes())?;
    write_out(&cfg.path("vocab"), world.tokenizer.to_vocab_text().as_bytes())?;
    write_out(&cfg.path("keys"), &keys.to_bytes())?;
    write_out(&cfg.path("prompts"), prompts_to_jsonl(&prompts).as_bytes())?;
    write_out(&cfg.path("items"), items_to_jsonl(&items).as_bytes())?;
    println!(
        "wrote {} sentences, {} image keys, {} held-out items",
        world.spec.n_sentences,
        keys.len(),
        items.len()
    );
    Ok(())
}

pub fn build_index(cfg: &RunConfig) -> Result<()> {
    let keys_path = cfg.input("keys")?;
    let m: usize = cfg.get("pq_m")?;
    let keys = EmbeddingTable::load(&keys_path)?;
    let params = IndexParams {
        dim: keys.dim(),
        n_centroids: cfg.get("centroids")?,
        codes: if m == 0 { CodeMode::Exact } else { CodeMode::Pq { m } },
        kmeans_iters: cfg.get("kmeans_iters")?,
        seed: cfg.get("index_seed")?,
    };
    let sample: Vec<Vec<f32>> = keys.iter().map(|(_, v)| v.to_vec()).collect();
    let mut index = train_index(&sample, params)?;
    index.add_keys(keys.iter())?;
    write_out(&cfg.path("index"), &index.to_bytes()?)?;
    println!(
        "indexed {} keys into {} lists (checksum {:016x})",
        index.len(),
        index.n_centroids(),
        index.checksum()
    );
    Ok(())
}

pub fn build_cache(cfg: &RunConfig) -> Result<()> {
    let corpus_path = cfg.input("corpus")?;
    world_inputs(cfg)?;
    let index_path = cfg.input("index")?;
    let plan = plan(cfg)?;
    if plan.mode != RetrievalMode::Retrieve {
        return Err(config_error("build-cache needs mode = retrieve"));
    }
    let world = load_world(cfg)?;
    let index = IvfPqIndex::load(&index_path)?;
    let corpus = load_corpus(&corpus_path, &world.tok)?;
    let retriever = Retriever::new(world.encoder.as_ref(), &index, &world.keys, default_stop_set(&world.tok))?;
    let cache = RetrievalCache::build(&corpus, &plan, &retriever)?;
    write_out(&cfg.path("cache"), &cache.to_bytes())?;
    println!("cached {} positions over {} documents", cache.len(), corpus.len());
    Ok(())
}

fn model_config(cfg: &RunConfig, vocab: usize) -> Result<ModelConfig> {
    let proj_mode: ProjMode = cfg.get("proj_mode")?;
    let layers: usize = cfg.get("layers")?;
    let mc = ModelConfig {
        num_images: cfg.get("k")?,
        proj_mode,
        dropout: cfg.get("dropout")?,
        ..ModelConfig::new(layers, cfg.get("heads")?, cfg.get("d_model")?, vocab, cfg.get("max_seq")?)
    };
    mc.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(mc)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let steps: usize = cfg.get("steps")?;
    let warmup: usize = cfg.get("warmup")?;
    let clip: f64 = cfg.get("clip")?;
    let tc = TrainConfig {
        lr: cfg.get("lr")?,
        warmup_steps: warmup.min(steps),
        total_steps: steps,
        batch_size: cfg.get("batch")?,
        seq_len: cfg.get("seq_len")?,
        dropout: cfg.get("dropout")?,
        seed: cfg.get("seed")?,
        checkpoint_every: cfg.get("checkpoint_every")?,
        clip_norm: (clip > 0.0).then_some(clip),
        ..TrainConfig::default()
    };
    tc.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(tc)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let corpus_path = cfg.input("corpus")?;
    let plan = plan(cfg)?;
    world_inputs(cfg)?;
    let (index_path, cache_path) = if plan.mode == RetrievalMode::Retrieve {
        (Some(cfg.input("index")?), Some(cfg.input("cache")?))
    } else {
        (None, None)
    };
    let init_path = match cfg.optional_path("init") {
        Some(_) => Some(cfg.input("init")?),
        None => None,
    };
    let tc = train_config(cfg)?;

    let world = load_world(cfg)?;
    let corpus = load_corpus(&corpus_path, &world.tok)?;
    let model = match &init_path {
        Some(p) => {
            let mut m = ModelState::load(p)?;
            m.config.dropout = tc.dropout;
            m
        }
        None => ModelState::new(model_config(cfg, world.tok.vocab_size())?, cfg.get("seed")?)?,
    };
    if model.config.vocab != world.tok.vocab_size() {
        return Err(config_error(format!(
            "model vocabulary {} differs from tokenizer vocabulary {}",
            model.config.vocab,
            world.tok.vocab_size()
        )));
    }
    if plan.mode != RetrievalMode::Disabled && model.config.d_model != world.keys.dim() {
        return Err(config_error(format!(
            "model width {} differs from key width {}",
            model.config.d_model,
            world.keys.dim()
        )));
    }

    let index;
    let cache;
    let aug = match plan.mode {
        RetrievalMode::Disabled => Augmenter::disabled(),
        RetrievalMode::Random => Augmenter::random(plan, &world.keys)?,
        RetrievalMode::Retrieve => {
            index = IvfPqIndex::load(index_path.as_deref().expect("checked above"))?;
            cache = RetrievalCache::load(cache_path.as_deref().expect("checked above"))?;
            cache.check_binding(&corpus, world.encoder.as_ref(), &index)?;
            Augmenter::cached(plan, &cache, &world.keys, None)?
        }
    };

    let ckpt_dir = (tc.checkpoint_every > 0).then(|| cfg.path("checkpoint_dir"));
    if let Some(dir) = &ckpt_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let out = train(&model, &corpus, &aug, &tc, ckpt_dir.as_deref())?;
    let ckpt = cfg.path("checkpoint");
    write_out(&ckpt, &out.model.to_checkpoint_bytes())?;
    write_out(&cfg.path("loss_csv"), loss_curve_csv(&out.curve).as_bytes())?;
    let mut echo = ckpt.clone().into_os_string();
    echo.push(".config");
    let echo_text = format!("# config_sha256 = {}\n{}", cfg.hash(), cfg.to_text());
    write_out(Path::new(&echo), echo_text.as_bytes())?;
    match out.curve.last() {
        Some(p) => println!("trained {} steps, final nll {:.4}", p.step, p.nll),
        None => println!("trained 0 steps"),
    }
    Ok(())
}

/// Retrieval inputs for the evaluation-time augmenter.
struct EvalWorld {
    world: Option<World>,
    index: Option<IvfPqIndex>,
}

fn eval_world(cfg: &RunConfig, plan: &AugmentationPlan) -> Result<EvalWorld> {
    match plan.mode {
        RetrievalMode::Disabled => {
            cfg.input("vocab")?;
            Ok(EvalWorld { world: None, index: None })
        }
        RetrievalMode::Random => {
            world_inputs(cfg)?;
            Ok(EvalWorld { world: Some(load_world(cfg)?), index: None })
        }
        RetrievalMode::Retrieve => {
            world_inputs(cfg)?;
            let index_path = cfg.input("index")?;
            let world = load_world(cfg)?;
            Ok(EvalWorld {
                world: Some(world),
                index: Some(IvfPqIndex::load(&index_path)?),
            })
        }
    }
}

impl EvalWorld {
    fn tokenizer(&self, cfg: &RunConfig) -> Result<WordTokenizer> {
        match &self.world {
            Some(w) => Ok(w.tok.clone()),
            None => Ok(WordTokenizer::from_vocab_text(&read_text(&cfg.input("vocab")?)?)),
        }
    }

    fn augmenter(&self, plan: &AugmentationPlan) -> Result<Augmenter<'_>> {
        Ok(match plan.mode {
            RetrievalMode::Disabled => Augmenter::disabled(),
            RetrievalMode::Random => {
                Augmenter::random(plan.clone(), &self.world.as_ref().expect("loaded").keys)?
            }
            RetrievalMode::Retrieve => {
                let w = self.world.as_ref().expect("loaded");
                let index = self.index.as_ref().expect("loaded");
                let r = Retriever::new(w.encoder.as_ref(), index, &w.keys, default_stop_set(&w.tok))?;
                Augmenter::live(plan.clone(), r)?
            }
        })
    }
}

fn report_paths(cfg: &RunConfig) -> (std::path::PathBuf, std::path::PathBuf) {
    let base = cfg.raw("report");
    (format!("{base}.json").into(), format!("{base}.csv").into())
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.input("checkpoint")?;
    let plan = plan(cfg)?;
    let task = cfg.raw("task").to_string();
    let inputs: Vec<&str> = match task.as_str() {
        "object" => vec!["prompts", "items"],
        "piqa" => vec!["items"],
        "perplexity" if cfg.optional_path("eval_corpus").is_some() => vec!["eval_corpus"],
        "perplexity" => vec!["corpus"],
        other => return Err(config_error(format!("unknown task '{other}'"))),
    };
    let inputs = inputs.iter().map(|k| cfg.input(k)).collect::<Result<Vec<_>>>()?;
    let ew = eval_world(cfg, &plan)?;
    let tok = ew.tokenizer(cfg)?;
    let model = ModelState::load(&ckpt)?;
    let aug = ew.augmenter(&plan)?;
    let (json_path, csv_path) = report_paths(cfg);

    let (summary, json, csv) = match task.as_str() {
        "object" => {
            let prompts = parse_prompts_jsonl(&read_text(&inputs[0])?)?;
            let items = parse_items_jsonl(&read_text(&inputs[1])?)?;
            let mut report = eval_object_task(&model, &aug, &tok, &prompts, &items)?;
            report.config = cfg.echo();
            (
                format!("mean accuracy {:.4} over {} prompts", report.mean_accuracy, report.prompts.len()),
                report.to_json(),
                report.to_csv(),
            )
        }
        "piqa" => {
            let items = parse_items_jsonl(&read_text(&inputs[0])?)?;
            let mut csv = String::from("item,chosen,gold,score0,score1\n");
            let mut correct = 0usize;
            for (n, it) in items.iter().enumerate() {
                let field = |k: &str| {
                    it.slots
                        .get(k)
                        .map(String::as_str)
                        .ok_or_else(|| config_error(format!("piqa item {n} lacks '{k}'")))
                };
                let (chosen, s) =
                    score_solutions_piqa(&model, &aug, &tok, field("goal")?, [field("sol1")?, field("sol2")?])?;
                correct += usize::from(it.gold == chosen.to_string());
                csv.push_str(&format!("{n},{chosen},{},{},{}\n", it.gold, s[0], s[1]));
            }
            let accuracy = if items.is_empty() { 0.0 } else { correct as f64 / items.len() as f64 };
            let json = json!({"task": "piqa", "items": items.len(), "accuracy": accuracy, "config": cfg.echo()});
            (
                format!("accuracy {accuracy:.4} over {} items", items.len()),
                serde_json::to_string_pretty(&json)? + "\n",
                csv,
            )
        }
        _ => {
            let corpus = load_corpus(&inputs[0], &tok)?;
            let ppl = perplexity(&model, &aug, &corpus)?;
            let lwa = last_word_accuracy(&model, &aug, corpus.docs())?;
            let json = json!({
                "task": "perplexity",
                "perplexity": ppl.perplexity,
                "mean_nll": ppl.mean_nll,
                "scored_tokens": ppl.scored_tokens,
                "last_word_accuracy": lwa,
                "config": cfg.echo(),
            });
            (
                format!("perplexity {:.4}, last-word accuracy {lwa:.4}", ppl.perplexity),
                serde_json::to_string_pretty(&json)? + "\n",
                format!(
                    "perplexity,mean_nll,scored_tokens,last_word_accuracy\n{},{},{},{}\n",
                    ppl.perplexity, ppl.mean_nll, ppl.scored_tokens, lwa
                ),
            )
        }
    };
    write_out(&json_path, json.as_bytes())?;
    write_out(&csv_path, csv.as_bytes())?;
    println!("{task} ({}): {summary}", plan.mode.as_str());
    Ok(())
}

pub fn bench_cmd(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.input("checkpoint")?;
    let corpus_path = cfg.input("corpus")?;
    let plan = plan(cfg)?;
    let samples: usize = cfg.get("bench_samples")?;
    let ew = eval_world(cfg, &plan)?;
    let tok = ew.tokenizer(cfg)?;
    let model = ModelState::load(&ckpt)?;
    let corpus = load_corpus(&corpus_path, &tok)?;
    let w = model.config.max_seq;
    let sample: Vec<Vec<_>> = corpus
        .docs()
        .iter()
        .flat_map(|d| d.chunks(w).filter(|c| c.len() >= 2).map(<[_]>::to_vec))
        .take(samples)
        .collect();
    let with = ew.augmenter(&plan)?;
    let report = bench_retrieval_overhead(&model, &with, &Augmenter::disabled(), &sample)?;
    let json = json!({"mode": plan.mode.as_str(), "bench": report, "config": cfg.echo()});
    let (json_path, csv_path) = report_paths(cfg);
    write_out(&json_path, (serde_json::to_string_pretty(&json)? + "\n").as_bytes())?;
    write_out(
        &csv_path,
        format!(
            "tokens,secs_with,secs_without,ratio\n{},{},{},{}\n",
            report.tokens, report.secs_with, report.secs_without, report.ratio
        )
        .as_bytes(),
    )?;
    println!(
        "{} tokens: {:.0} tok/s in {} mode, {:.0} tok/s without retrieval, ratio {:.2}",
        report.tokens,
        report.tokens_per_sec_with,
        plan.mode.as_str(),
        report.tokens_per_sec_without,
        report.ratio
    );
    Ok(())
}
