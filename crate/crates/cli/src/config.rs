//! Run configuration: a fixed schema of `key = value` settings merged from
//! defaults, an optional config file and command-line flags, in increasing
//! order of precedence.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use valm_core::io::sha256_hex;
use valm_core::kv::KvConfig;

/// Problems with the configuration itself, detected before any work starts.
#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Every accepted key with its default and a one-line description.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("corpus", "data/corpus.txt", "training text; blank lines separate documents"),
    ("vocab", "data/vocab.txt", "tokenizer vocabulary, one word per line"),
    ("keys", "data/keys.emb", "image key store (embedding table file)"),
    ("prompts", "data/prompts.jsonl", "evaluation prompts, JSON lines {task, template, labels}"),
    ("items", "data/items.jsonl", "evaluation items, JSON lines {slot..., gold} or {goal, sol1, sol2, gold}"),
    ("objects", "100", "gen-corpus: number of objects"),
    ("attributes", "8", "gen-corpus: number of attribute values"),
    ("sentences", "10000", "gen-corpus: training sentences"),
    ("test_fraction", "0.5", "gen-corpus: share of objects held out of the text"),
    ("corpus_seed", "0", "gen-corpus: generator seed"),
    ("encoder", "synthetic", "synthetic | precomputed"),
    ("encoder_dim", "64", "synthetic encoder: embedding width"),
    ("encoder_seed", "1", "synthetic encoder: seed"),
    ("text_emb", "", "precomputed encoder: text-chunk embedding table"),
    ("max_chunk", "75", "precomputed encoder: longest chunk it accepts"),
    ("index", "data/kb.index", "retrieval index file"),
    ("centroids", "32", "build-index: coarse centroids"),
    ("pq_m", "8", "build-index: PQ sub-quantizers; 0 stores exact vectors"),
    ("kmeans_iters", "20", "build-index: k-means passes"),
    ("index_seed", "1", "build-index: seed"),
    ("mode", "retrieve", "retrieve | disabled | random"),
    ("k", "4", "images per position"),
    ("nprobe", "8", "posting lists searched per query"),
    ("stride", "1", "retrieve at every stride-th position"),
    ("cache", "data/train.cache", "retrieval cache over the training corpus"),
    ("layers", "2", "decoder layers"),
    ("heads", "4", "attention heads"),
    ("d_model", "64", "model width; must equal the key dimension"),
    ("max_seq", "64", "longest sequence the model accepts"),
    ("proj_mode", "shared-weights-image-bias", "shared-weights-image-bias | image-specific | shared-all"),
    ("seed", "7", "model init, batch order, dropout and random-mode draws"),
    ("lr", "0.001", "peak learning rate"),
    ("warmup", "100", "linear warmup steps, capped at steps"),
    ("steps", "2000", "optimizer steps"),
    ("batch", "4", "sequences per step"),
    ("seq_len", "64", "training block length"),
    ("dropout", "0", "attention dropout rate"),
    ("clip", "1.0", "global gradient-norm ceiling; 0 disables"),
    ("init", "", "train: start from this checkpoint instead of a fresh model"),
    ("checkpoint", "out/model.ckpt", "model checkpoint written by train, read by eval and bench"),
    ("checkpoint_every", "0", "train: intermediate checkpoint period; 0 disables"),
    ("checkpoint_dir", "out/checkpoints", "train: directory for intermediate checkpoints"),
    ("loss_csv", "out/loss.csv", "train: loss curve (step, lr, nll)"),
    ("task", "object", "eval: object | piqa | perplexity"),
    ("eval_corpus", "", "eval perplexity: text to score; defaults to corpus"),
    ("report", "out/report", "eval and bench: report path prefix (.json, .csv)"),
    ("bench_samples", "32", "bench: corpus windows timed"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    kv: KvConfig,
}

impl RunConfig {
    /// Defaults, overlaid by `file` if given, overlaid by `flags`.
    pub fn build(file: Option<&Path>, flags: &KvConfig) -> anyhow::Result<Self> {
        let mut defaults = KvConfig::new();
        for (k, v, _) in SCHEMA {
            defaults.set(k, v);
        }
        let from_file = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_error(format!("cannot read config file {}: {e}", p.display())))?;
                KvConfig::parse(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
            }
            None => KvConfig::new(),
        };
        let allowed: Vec<&str> = SCHEMA.iter().map(|(k, _, _)| *k).collect();
        for layer in [&from_file, flags] {
            layer.check_keys(&allowed).map_err(|e| config_error(e.to_string()))?;
        }
        Ok(Self {
            kv: defaults.merged(&from_file).merged(flags),
        })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.kv.get(key).expect("every schema key has a default")
    }

    pub fn get<T>(&self, key: &str) -> anyhow::Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e: T::Err| config_error(format!("key '{key}': cannot parse '{v}': {e}")))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Path to an existing input file.
    pub fn input(&self, key: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(key);
        if p.as_os_str().is_empty() {
            return Err(config_error(format!("'{key}' is not set")));
        }
        if !p.is_file() {
            return Err(config_error(format!("{key} = {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Effective configuration as `key = value` text.
    pub fn to_text(&self) -> String {
        self.kv.to_text()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Effective configuration plus its hash, for embedding in reports.
    pub fn echo(&self) -> std::collections::BTreeMap<String, String> {
        let mut map: std::collections::BTreeMap<String, String> = self
            .kv
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        map.insert("config_sha256".into(), self.hash());
        map
    }
}

/// Markdown table of the schema.
pub fn schema_markdown() -> String {
    let mut out = String::from("| key | default | meaning |\n|---|---|---|\n");
    for (k, v, d) in SCHEMA {
        let v = if v.is_empty() { "(unset)".to_string() } else { format!("`{v}`") };
        out.push_str(&format!("| `{k}` | {v} | {} |\n", d.replace('|', "\\|")));
    }
    out
}
