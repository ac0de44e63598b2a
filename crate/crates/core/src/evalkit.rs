//! Zero-shot evaluation: label ranking over filled prompt templates,
//! two-way solution scoring, perplexity and retrieval overhead timing.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, Augmenter};
use crate::corpus::Corpus;
use crate::model::{ModelError, ModelState};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty label set")]
    EmptyLabelSet,
    #[error("label '{0}' tokenizes to nothing")]
    EmptyLabel(String),
    #[error("gold label '{0}' is not in the label set")]
    GoldLabelMissing(String),
    #[error("solution {0} is empty")]
    EmptySolution(usize),
    #[error("corpus has nothing to score")]
    EmptyCorpus,
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("bad input line {line}: {reason}")]
    BadInput { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// A prompt template with `[ITEM]`-style slots and a closed label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task: String,
    pub template: String,
    pub labels: Vec<String>,
}

pub const COLOR_LABELS: [&str; 11] = [
    "red", "white", "orange", "green", "blue", "yellow", "purple", "black", "pink", "grey", "brown",
];

pub const SHAPE_LABELS: [&str; 12] = [
    "cross",
    "heart",
    "octagon",
    "oval",
    "polygon",
    "rectangle",
    "rhombus",
    "round",
    "semicircle",
    "square",
    "star",
    "triangle",
];

pub const SIZE_LABELS: [&str; 2] = ["Yes", "No"];

const COLOR_TEMPLATES: [&str; 9] = [
    "Q: What is the color of [DESCRIPTOR] [ITEM]? A: It is",
    "Q: What is the colour of [DESCRIPTOR] [ITEM] ? A: It is",
    "What is the color of [DESCRIPTOR] [ITEM]? It is",
    "What is the colour of [DESCRIPTOR] [ITEM]?",
    "The color of [DESCRIPTOR] [ITEM] is",
    "The usual color of [DESCRIPTOR] [ITEM] is",
    "[DESCRIPTOR] [ITEM] usually has the color of",
    "What is the usual color of [DESCRIPTOR] [ITEM]?",
    "What is the typical color of [DESCRIPTOR] [ITEM]?",
];

const SHAPE_TEMPLATES: [&str; 5] = [
    "[ITEM] can be shape",
    "[ITEM] has shape",
    "[ITEM] is of shape",
    "The shape of [ITEM] can be",
    "The shape of the [ITEM] is",
];

const SIZE_TEMPLATES: [&str; 5] = [
    "Is [ITEMA] larger than [ITEMB]?",
    "Is [ITEMA] taller than [ITEMB]?",
    "Is [ITEMA] higher than [ITEMB]?",
    "[ITEMA] is larger than [ITEMB], is it true?",
    "[ITEMA] is taller than [ITEMB], is it true?",
];

fn specs(task: &str, templates: &[&str], labels: &[&str]) -> Vec<PromptSpec> {
    templates
        .iter()
        .map(|t| PromptSpec {
            task: task.to_string(),
            template: t.to_string(),
            labels: labels.iter().map(|l| l.to_string()).collect(),
        })
        .collect()
}

/// Object color probes over the 11 color labels.
pub fn color_prompts() -> Vec<PromptSpec> {
    specs("color", &COLOR_TEMPLATES, &COLOR_LABELS)
}

/// Object shape probes over the 12 shape labels.
pub fn shape_prompts() -> Vec<PromptSpec> {
    specs("shape", &SHAPE_TEMPLATES, &SHAPE_LABELS)
}

/// Relative size probes with Yes/No labels.
pub fn size_prompts() -> Vec<PromptSpec> {
    specs("size", &SIZE_TEMPLATES, &SIZE_LABELS)
}

impl PromptSpec {
    /// Slots the task needs filled.
    pub fn required_slots(&self) -> &'static [&'static str] {
        match self.task.as_str() {
            "size" => &["ITEMA", "ITEMB"],
            _ => &["ITEM"],
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.labels.is_empty() {
            return Err(EvalError::EmptyLabelSet);
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.labels {
            if !seen.insert(l) {
                return Err(EvalError::InvalidPrompt(format!("duplicate label '{l}'")));
            }
        }
        for slot in self.required_slots() {
            if !self.template.contains(&format!("[{slot}]")) {
                return Err(EvalError::InvalidPrompt(format!(
                    "template '{}' lacks [{slot}]",
                    self.template
                )));
            }
        }
        Ok(())
    }

    /// Substitutes `[KEY]` for each slot value. An unfilled `[DESCRIPTOR]`
    /// is dropped along with its surrounding space.
    pub fn fill(&self, slots: &BTreeMap<String, String>) -> Result<String, EvalError> {
        let mut text = self.template.clone();
        for (k, v) in slots {
            text = text.replace(&format!("[{k}]"), v);
        }
        text = text.replace("[DESCRIPTOR]", "");
        if let Some(start) = text.find('[') {
            if text[start..].contains(']') {
                return Err(EvalError::InvalidPrompt(format!("unfilled slot in '{text}'")));
            }
        }
        Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

/// One item to classify: slot values and the gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub slots: BTreeMap<String, String>,
    pub gold: String,
}

/// Parses prompt specs, one JSON object per line: `{task, template, labels}`.
pub fn parse_prompts_jsonl(text: &str) -> Result<Vec<PromptSpec>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let p: PromptSpec = serde_json::from_str(l).map_err(|e| EvalError::BadInput {
                line: n + 1,
                reason: e.to_string(),
            })?;
            p.validate()?;
            Ok(p)
        })
        .collect()
}

/// Parses items, one JSON object per line: slot names mapped to strings
/// plus a `gold` field.
pub fn parse_items_jsonl(text: &str) -> Result<Vec<EvalItem>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let bad = |reason: String| EvalError::BadInput { line: n + 1, reason };
            let mut map: BTreeMap<String, String> =
                serde_json::from_str(l).map_err(|e| bad(e.to_string()))?;
            let gold = map.remove("gold").ok_or_else(|| bad("missing gold".into()))?;
            Ok(EvalItem { slots: map, gold })
        })
        .collect()
}

pub fn items_to_jsonl(items: &[EvalItem]) -> String {
    items
        .iter()
        .map(|it| {
            let mut map = it.slots.clone();
            map.insert("gold".into(), it.gold.clone());
            serde_json::to_string(&map).expect("string map serializes") + "\n"
        })
        .collect()
}

pub fn prompts_to_jsonl(prompts: &[PromptSpec]) -> String {
    prompts
        .iter()
        .map(|p| serde_json::to_string(p).expect("prompt serializes") + "\n")
        .collect()
}

/// Keeps the last `max` tokens.
fn tail(seq: &[TokenId], max: usize) -> &[TokenId] {
    &seq[seq.len().saturating_sub(max)..]
}

/// Sum of log-probabilities of `continuation` after `context`.
fn continuation_logprob(
    model: &ModelState,
    aug: &Augmenter<'_>,
    context: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64, EvalError> {
    let mut seq = context.to_vec();
    seq.extend_from_slice(continuation);
    let seq = tail(&seq, model.config.max_seq);
    let images = aug.augment_positions(seq)?;
    let lp = model.target_logprobs(seq, &images)?;
    Ok(lp[lp.len() - continuation.len()..].iter().sum())
}

/// Tokens of `label` when appended to `prompt`.
fn label_tokens(tok: &dyn Tokenizer, prompt: &[TokenId], prompt_text: &str, label: &str) -> Vec<TokenId> {
    let full = tok.encode(&format!("{prompt_text} {label}"));
    if full.starts_with(prompt) {
        full[prompt.len()..].to_vec()
    } else {
        tok.encode(label)
    }
}

/// Labels ordered by summed log-probability of their tokens after
/// `prompt`, best first; ties go to the lexicographically smaller label.
pub fn rank_labels(
    model: &ModelState,
    aug: &Augmenter<'_>,
    tok: &dyn Tokenizer,
    prompt: &str,
    labels: &[String],
) -> Result<Vec<(String, f64)>, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::EmptyLabelSet);
    }
    let context = tok.encode(prompt);
    let mut scored = labels
        .iter()
        .map(|label| {
            let cont = label_tokens(tok, &context, prompt, label);
            if cont.is_empty() {
                return Err(EvalError::EmptyLabel(label.clone()));
            }
            Ok((label.clone(), continuation_logprob(model, aug, &context, &cont)?))
        })
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptAccuracy {
    pub template: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub prompt: usize,
    pub item: usize,
    pub predicted: String,
    pub gold: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub prompts: Vec<PromptAccuracy>,
    pub mean_accuracy: f64,
    pub predictions: Vec<Prediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_word_accuracy: Option<f64>,
    /// Effective configuration of the run.
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per prediction.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prompt,item,predicted,gold,correct\n");
        for p in &self.predictions {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.prompt, p.item, p.predicted, p.gold, p.correct
            ));
        }
        out
    }
}

/// Top-1 accuracy of every prompt over every item, and their mean.
pub fn eval_object_task(
    model: &ModelState,
    aug: &Augmenter<'_>,
    tok: &dyn Tokenizer,
    prompts: &[PromptSpec],
    items: &[EvalItem],
) -> Result<EvalReport, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::InvalidPrompt("no prompts".into()));
    }
    for p in prompts {
        p.validate()?;
        if let Some(it) = items.iter().find(|it| !p.labels.contains(&it.gold)) {
            return Err(EvalError::GoldLabelMissing(it.gold.clone()));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..items.len()).map(move |i| (p, i)))
        .collect();
    let predictions = jobs
        .par_iter()
        .map(|&(p, i)| {
            let text = prompts[p].fill(&items[i].slots)?;
            let ranked = rank_labels(model, aug, tok, &text, &prompts[p].labels)?;
            let predicted = ranked[0].0.clone();
            Ok(Prediction {
                prompt: p,
                item: i,
                correct: predicted == items[i].gold,
                predicted,
                gold: items[i].gold.clone(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let per_prompt: Vec<PromptAccuracy> = prompts
        .iter()
        .enumerate()
        .map(|(p, spec)| {
            let correct = predictions.iter().filter(|r| r.prompt == p && r.correct).count();
            PromptAccuracy {
                template: spec.template.clone(),
                accuracy: if items.is_empty() {
                    0.0
                } else {
                    correct as f64 / items.len() as f64
                },
            }
        })
        .collect();
    let mean_accuracy = per_prompt.iter().map(|p| p.accuracy).sum::<f64>() / per_prompt.len() as f64;
    Ok(EvalReport {
        task: prompts[0].task.clone(),
        prompts: per_prompt,
        mean_accuracy,
        predictions,
        perplexity: None,
        last_word_accuracy: None,
        config: BTreeMap::new(),
    })
}

/// Mean token cross-entropy of `goal` followed by each solution; the lower
/// one wins and exact ties go to the first.
pub fn score_solutions_piqa(
    model: &ModelState,
    aug: &Augmenter<'_>,
    tok: &dyn Tokenizer,
    goal: &str,
    solutions: [&str; 2],
) -> Result<(usize, [f64; 2]), EvalError> {
    let mut scores = [0.0; 2];
    for (j, sol) in solutions.iter().enumerate() {
        if sol.trim().is_empty() {
            return Err(EvalError::EmptySolution(j));
        }
        let seq = tok.encode(&format!("{goal} {sol}"));
        let seq = tail(&seq, model.config.max_seq);
        if seq.len() < 2 {
            return Err(EvalError::EmptySolution(j));
        }
        let images = aug.augment_positions(seq)?;
        scores[j] = model.nll(seq, &images)?;
    }
    let chosen = if scores[1] < scores[0] { 1 } else { 0 };
    Ok((chosen, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub scored_tokens: usize,
    pub mean_nll: f64,
}

/// `exp` of the mean next-token NLL over non-overlapping `max_seq` windows
/// of every document; the first token of each window is context only.
pub fn perplexity(
    model: &ModelState,
    aug: &Augmenter<'_>,
    corpus: &Corpus,
) -> Result<PerplexityReport, EvalError> {
    let w = model.config.max_seq;
    let windows: Vec<(usize, usize, usize)> = corpus
        .docs()
        .iter()
        .enumerate()
        .flat_map(|(d, toks)| {
            (0..toks.len())
                .step_by(w)
                .map(move |s| (d, s, w.min(toks.len() - s)))
                .filter(|&(_, _, len)| len >= 2)
        })
        .collect();
    if windows.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let sums = windows
        .par_iter()
        .map(|&(d, s, len)| {
            let seq = &corpus.doc(d)[s..s + len];
            let images = aug.augment_span(corpus, d, s, len)?;
            let lp = model.target_logprobs(seq, &images)?;
            Ok((-lp.iter().sum::<f64>(), lp.len()))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let (total, count) = sums
        .iter()
        .fold((0.0, 0usize), |(t, c), &(s, n)| (t + s, c + n));
    let mean_nll = total / count as f64;
    Ok(PerplexityReport {
        perplexity: mean_nll.exp(),
        scored_tokens: count,
        mean_nll,
    })
}

/// Fraction of passages whose final token is the argmax prediction given
/// everything before it.
pub fn last_word_accuracy(
    model: &ModelState,
    aug: &Augmenter<'_>,
    passages: &[Vec<TokenId>],
) -> Result<f64, EvalError> {
    let usable: Vec<&Vec<TokenId>> = passages.iter().filter(|p| p.len() >= 2).collect();
    if usable.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let hits = usable
        .par_iter()
        .map(|p| {
            let (ctx, last) = p.split_at(p.len() - 1);
            let ctx = tail(ctx, model.config.max_seq);
            let lp = model.next_token_logprobs(ctx, &aug.augment_positions(ctx)?)?;
            let best = lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            Ok(usize::from(best == last[0] as usize))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / usable.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchReport {
    pub tokens: usize,
    pub secs_with: f64,
    pub secs_without: f64,
    pub tokens_per_sec_with: f64,
    pub tokens_per_sec_without: f64,
    /// `secs_with / secs_without`.
    pub ratio: f64,
}

/// Times retrieval plus forward under `with` against forward under
/// `without` over the same sequences.
pub fn bench_retrieval_overhead(
    model: &ModelState,
    with: &Augmenter<'_>,
    without: &Augmenter<'_>,
    sample: &[Vec<TokenId>],
) -> Result<BenchReport, EvalError> {
    let run = |aug: &Augmenter<'_>| -> Result<f64, EvalError> {
        let start = Instant::now();
        for seq in sample {
            let seq = tail(seq, model.config.max_seq);
            let images = aug.augment_positions(seq)?;
            std::hint::black_box(model.forward(seq, &images)?);
        }
        Ok(start.elapsed().as_secs_f64())
    };
    let tokens: usize = sample.iter().map(|s| s.len().min(model.config.max_seq)).sum();
    let secs_without = run(without)?;
    let secs_with = run(with)?;
    let tps = |secs: f64| if secs > 0.0 { tokens as f64 / secs } else { f64::INFINITY };
    Ok(BenchReport {
        tokens,
        secs_with,
        secs_without,
        tokens_per_sec_with: tps(secs_with),
        tokens_per_sec_without: tps(secs_without),
        ratio: if secs_without > 0.0 { secs_with / secs_without } else { 1.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::WordTokenizer;

    fn setup() -> (ModelState, WordTokenizer) {
        let tok = WordTokenizer::from_vocab(["the", "sky", "is", "blue", "red", "green", "."]);
        let cfg = ModelConfig::tiny(tok.vocab_size(), 2);
        (ModelState::new(cfg, 9).unwrap(), tok)
    }

    #[test]
    fn reference_prompt_sets_are_valid() {
        let color = color_prompts();
        assert_eq!(color.len(), 9);
        assert_eq!(color[0].labels.len(), 11);
        assert_eq!(shape_prompts()[0].labels.len(), 12);
        for p in color.iter().chain(&shape_prompts()).chain(&size_prompts()) {
            p.validate().unwrap();
        }
        let mut slots = BTreeMap::new();
        slots.insert("ITEM".to_string(), "banana".to_string());
        assert_eq!(color[4].fill(&slots).unwrap(), "The color of banana is");
        slots.insert("DESCRIPTOR".into(), "ripe".into());
        assert_eq!(color[4].fill(&slots).unwrap(), "The color of ripe banana is");
    }

    #[test]
    fn prompt_validation() {
        let p = PromptSpec {
            task: "color".into(),
            template: "no slot here".into(),
            labels: vec!["a".into()],
        };
        assert!(matches!(p.validate(), Err(EvalError::InvalidPrompt(_))));
        let p = PromptSpec {
            template: "[ITEM] is".into(),
            labels: vec![],
            ..p
        };
        assert!(matches!(p.validate(), Err(EvalError::EmptyLabelSet)));
    }

    #[test]
    fn jsonl_roundtrip() {
        let prompts = color_prompts();
        assert_eq!(parse_prompts_jsonl(&prompts_to_jsonl(&prompts)).unwrap(), prompts);
        let items = parse_items_jsonl("{\"ITEM\": \"sky\", \"gold\": \"blue\"}\n\n").unwrap();
        assert_eq!(items[0].gold, "blue");
        assert_eq!(parse_items_jsonl(&items_to_jsonl(&items)).unwrap(), items);
        assert!(matches!(parse_items_jsonl("{\"ITEM\": \"x\"}"), Err(EvalError::BadInput { line: 1, .. })));
    }

    #[test]
    fn ranking_matches_direct_logprob_and_breaks_ties_by_name() {
        let (m, tok) = setup();
        let aug = Augmenter::disabled();
        let labels: Vec<String> = ["red", "blue", "green"].iter().map(|s| s.to_string()).collect();
        let ranked = rank_labels(&m, &aug, &tok, "the sky is", &labels).unwrap();
        let ctx = tok.encode("the sky is");
        for (label, score) in &ranked {
            let lp = m.next_token_logprobs(&ctx, &aug.augment_positions(&ctx).unwrap()).unwrap();
            assert_eq!(*score, lp[tok.token_id(label).unwrap() as usize]);
        }
        assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        let same: Vec<String> = vec!["blue".into(), "blue".into()];
        let r = rank_labels(&m, &aug, &tok, "the sky is", &same).unwrap();
        assert_eq!(r[0].1, r[1].1);
        assert!(matches!(rank_labels(&m, &aug, &tok, "x", &[]), Err(EvalError::EmptyLabelSet)));
    }

    #[test]
    fn accuracy_is_mean_over_prompts() {
        let (m, tok) = setup();
        let aug = Augmenter::disabled();
        let labels = vec!["red".to_string(), "blue".to_string()];
        let prompts = vec![
            PromptSpec { task: "color".into(), template: "the [ITEM] is".into(), labels: labels.clone() },
            PromptSpec { task: "color".into(), template: "[ITEM] is".into(), labels },
        ];
        let items: Vec<EvalItem> = ["red", "blue"]
            .iter()
            .map(|g| EvalItem {
                slots: [("ITEM".to_string(), "sky".to_string())].into(),
                gold: g.to_string(),
            })
            .collect();
        let r = eval_object_task(&m, &aug, &tok, &prompts, &items).unwrap();
        // Same prompt for two opposite golds: exactly one is right.
        for p in &r.prompts {
            assert_eq!(p.accuracy, 0.5);
        }
        assert_eq!(r.mean_accuracy, 0.5);
        assert_eq!(r.to_csv().lines().count(), 5);
        let bad = vec![EvalItem { slots: items[0].slots.clone(), gold: "pink".into() }];
        assert!(matches!(
            eval_object_task(&m, &aug, &tok, &prompts, &bad),
            Err(EvalError::GoldLabelMissing(_))
        ));
    }

    #[test]
    fn piqa_ties_and_antisymmetry() {
        let (m, tok) = setup();
        let aug = Augmenter::disabled();
        let (c, s) = score_solutions_piqa(&m, &aug, &tok, "the sky", ["is blue", "is blue"]).unwrap();
        assert_eq!((c, s[0]), (0, s[1]));
        let (a, sa) = score_solutions_piqa(&m, &aug, &tok, "the sky", ["is blue", "red red"]).unwrap();
        let (b, sb) = score_solutions_piqa(&m, &aug, &tok, "the sky", ["red red", "is blue"]).unwrap();
        assert_eq!(sa[0], sb[1]);
        assert_ne!(sa[0], sa[1]);
        assert_eq!(a, 1 - b);
        assert!(matches!(
            score_solutions_piqa(&m, &aug, &tok, "the sky", ["", "x"]),
            Err(EvalError::EmptySolution(0))
        ));
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let (mut m, tok) = setup();
        m.params.head_w.fill(0.0);
        m.params.head_b.fill(0.0);
        let corpus = Corpus::new(vec![tok.encode("the sky is blue . the sky is red . the sky"), vec![3, 4, 5]]);
        let r = perplexity(&m, &Augmenter::disabled(), &corpus).unwrap();
        let v = tok.vocab_size() as f64;
        assert!((r.perplexity - v).abs() < 1e-9 * v, "{}", r.perplexity);
        // Windows of 16 over 12 and 3 tokens score 11 + 2 positions.
        assert_eq!(r.scored_tokens, 13);
        assert!(matches!(
            perplexity(&m, &Augmenter::disabled(), &Corpus::new(vec![vec![1]])),
            Err(EvalError::EmptyCorpus)
        ));
    }

    #[test]
    fn bench_reports_a_ratio() {
        let (m, _) = setup();
        let aug = Augmenter::disabled();
        let r = bench_retrieval_overhead(&m, &aug, &aug, &vec![vec![1, 2, 3, 4]; 3]).unwrap();
        assert_eq!(r.tokens, 12);
        assert!(r.ratio > 0.0);
    }
}
