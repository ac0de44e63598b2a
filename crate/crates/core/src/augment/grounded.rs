//! Synthetic grounded corpus: objects with one hidden attribute each, text
//! that states the attribute only for training objects, and an image
//! knowledge base that covers every (object, attribute) pair.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::AugmentError;
use crate::encoder::{encode_image_key, EmbeddingTable, ImageRecord, SyntheticEncoder};
use crate::rng::rng_for;
use crate::tokenizer::{TokenId, Tokenizer, WordTokenizer};

/// Attribute words in label order; generated names follow once exhausted.
pub const ATTRIBUTE_WORDS: [&str; 11] = [
    "red", "white", "orange", "green", "blue", "yellow", "purple", "black", "pink", "grey", "brown",
];

/// Sentence templates. Each states the attribute after naming the object,
/// and the attribute is the last word before the period.
pub const PROMPT_TEMPLATES: [&str; 4] = [
    "the color of [ITEM] is [LABEL] .",
    "the usual color of [ITEM] is [LABEL] .",
    "[ITEM] usually has the color of [LABEL] .",
    "[ITEM] is [LABEL] .",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundedCorpusSpec {
    pub n_objects: usize,
    pub n_attributes: usize,
    pub n_sentences: usize,
    /// Fraction of objects held out of the training text.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GroundedCorpusSpec {
    fn default() -> Self {
        Self {
            n_objects: 100,
            n_attributes: 8,
            n_sentences: 10_000,
            test_fraction: 0.5,
            seed: 0,
        }
    }
}

/// One object with its gold attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedItem {
    pub object: String,
    pub attribute: u32,
}

#[derive(Debug, Clone)]
pub struct GroundedCorpus {
    pub spec: GroundedCorpusSpec,
    pub tokenizer: WordTokenizer,
    /// One sentence per line.
    pub train_text: String,
    pub attribute_words: Vec<String>,
    pub object_words: Vec<String>,
    pub train_items: Vec<GroundedItem>,
    pub test_items: Vec<GroundedItem>,
    /// One image per (object, attribute); id = object index × n_attributes
    /// + attribute.
    pub kb: Vec<ImageRecord>,
}

impl GroundedCorpus {
    pub fn object_token(&self, object: &str) -> TokenId {
        self.tokenizer.token_id(object).expect("object words are in the vocabulary")
    }

    pub fn attribute_word(&self, attribute: u32) -> &str {
        &self.attribute_words[attribute as usize]
    }

    /// Object token → attribute for every object, train and test.
    pub fn attribute_table(&self) -> BTreeMap<TokenId, u32> {
        self.train_items
            .iter()
            .chain(&self.test_items)
            .map(|it| (self.object_token(&it.object), it.attribute))
            .collect()
    }

    pub fn image_id(&self, object: &str, attribute: u32) -> u64 {
        let idx = self
            .object_words
            .iter()
            .position(|w| w == object)
            .expect("known object");
        (idx * self.spec.n_attributes) as u64 + u64::from(attribute)
    }

    pub fn encoder(&self, dim: usize, seed: u64) -> Result<SyntheticEncoder, AugmentError> {
        Ok(SyntheticEncoder::new(
            dim,
            seed,
            self.spec.n_attributes as u32,
            self.attribute_table(),
        )?)
    }

    /// Image keys of the whole knowledge base.
    pub fn key_table(&self, enc: &SyntheticEncoder) -> Result<EmbeddingTable, AugmentError> {
        let mut table = EmbeddingTable::new(crate::encoder::JointEncoder::dim(enc));
        for rec in &self.kb {
            table.push(rec.id, &encode_image_key(enc, rec)?)?;
        }
        Ok(table)
    }

    /// Training text tokenized as a single document.
    pub fn train_tokens(&self) -> Vec<TokenId> {
        self.tokenizer.encode(&self.train_text)
    }
}

fn attribute_word(i: usize) -> String {
    ATTRIBUTE_WORDS
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("attr{i}"))
}

fn fill(template: &str, object: &str, label: &str) -> String {
    template.replace("[ITEM]", object).replace("[LABEL]", label)
}

pub fn generate_grounded_corpus(spec: GroundedCorpusSpec) -> Result<GroundedCorpus, AugmentError> {
    if spec.n_objects < 4 || spec.n_attributes < 2 {
        return Err(AugmentError::SpecInfeasible(format!(
            "need at least 4 objects and 2 attributes, got {} and {}",
            spec.n_objects, spec.n_attributes
        )));
    }
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(AugmentError::SpecInfeasible(format!(
            "test fraction {} outside (0, 1)",
            spec.test_fraction
        )));
    }
    let width = spec.n_objects.saturating_sub(1).to_string().len().max(2);
    let object_words: Vec<String> = (0..spec.n_objects).map(|i| format!("obj{i:0width$}")).collect();
    let attribute_words: Vec<String> = (0..spec.n_attributes).map(attribute_word).collect();

    // Balanced attributes over a seeded permutation of the objects.
    let mut order: Vec<usize> = (0..spec.n_objects).collect();
    order.shuffle(&mut rng_for(spec.seed, &[0x0b1]));
    let mut attribute = vec![0u32; spec.n_objects];
    for (rank, &obj) in order.iter().enumerate() {
        attribute[obj] = (rank % spec.n_attributes) as u32;
    }
    // Stratified split: walk objects grouped by attribute, marking the
    // positions where the running test quota increases.
    let mut grouped = order.clone();
    grouped.sort_by_key(|&o| attribute[o]);
    let mut is_test = vec![false; spec.n_objects];
    for (j, &obj) in grouped.iter().enumerate() {
        let before = (j as f64 * spec.test_fraction).floor();
        let after = ((j + 1) as f64 * spec.test_fraction).floor();
        is_test[obj] = after > before;
    }
    let item = |o: usize| GroundedItem {
        object: object_words[o].clone(),
        attribute: attribute[o],
    };
    let train_items: Vec<GroundedItem> = (0..spec.n_objects).filter(|&o| !is_test[o]).map(item).collect();
    let test_items: Vec<GroundedItem> = (0..spec.n_objects).filter(|&o| is_test[o]).map(item).collect();

    let mut by_attribute: Vec<Vec<usize>> = vec![Vec::new(); spec.n_attributes];
    for (i, it) in train_items.iter().enumerate() {
        by_attribute[it.attribute as usize].push(i);
    }
    if by_attribute.iter().any(Vec::is_empty) {
        return Err(AugmentError::SpecInfeasible(
            "some attribute has no training object".into(),
        ));
    }

    let mut rng = rng_for(spec.seed, &[0x5e7]);
    let mut train_text = String::new();
    for _ in 0..spec.n_sentences {
        let a = rng.random_range(0..spec.n_attributes);
        let group = &by_attribute[a];
        let it = &train_items[group[rng.random_range(0..group.len())]];
        let template = PROMPT_TEMPLATES[rng.random_range(0..PROMPT_TEMPLATES.len())];
        train_text.push_str(&fill(template, &it.object, &attribute_words[a]));
        train_text.push('\n');
    }

    let mut vocab: Vec<String> = Vec::new();
    for t in PROMPT_TEMPLATES {
        for w in t.split_whitespace() {
            if !w.starts_with('[') && !vocab.iter().any(|v| v == w) {
                vocab.push(w.to_string());
            }
        }
    }
    vocab.extend(attribute_words.iter().cloned());
    vocab.extend(object_words.iter().cloned());
    let tokenizer = WordTokenizer::from_vocab(vocab);

    let kb = object_words
        .iter()
        .enumerate()
        .flat_map(|(oi, w)| {
            let object = tokenizer.token_id(w).expect("object in vocabulary");
            (0..spec.n_attributes as u32).map(move |a| ImageRecord {
                id: (oi * spec.n_attributes) as u64 + u64::from(a),
                object,
                attribute: a,
            })
        })
        .collect();

    Ok(GroundedCorpus {
        spec,
        tokenizer,
        train_text,
        attribute_words,
        object_words,
        train_items,
        test_items,
        kb,
    })
}
