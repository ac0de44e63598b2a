//! Pluggable tokenizers. Byte-level is the default; the word-level
//! tokenizer backs the synthetic grounding experiments where object names
//! must be single tokens.

use std::collections::{BTreeSet, HashMap};

pub type TokenId = u32;

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
    /// Short identifier, recorded in reports.
    fn name(&self) -> String;
}

/// One token per UTF-8 byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids.iter().map(|&i| i.min(255) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        256
    }

    fn name(&self) -> String {
        "byte".to_string()
    }
}

pub const UNK: &str = "<unk>";
pub const NEWLINE: &str = "<nl>";

/// Whitespace word tokenizer with sentence punctuation split into its own
/// token. Lines are joined by the `<nl>` token.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl WordTokenizer {
    /// Vocabulary in the given order; `<unk>` and `<nl>` are added first if
    /// missing.
    pub fn from_vocab<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = vec![UNK.to_string(), NEWLINE.to_string()];
        for w in words {
            let w = w.into();
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self { vocab, index }
    }

    /// Sorted vocabulary of every word seen in `texts`.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for line in text.lines() {
                words.extend(split_words(line).map(str::to_string));
            }
        }
        Self::from_vocab(words)
    }

    /// Parses a vocabulary file: one token per line.
    pub fn from_vocab_text(text: &str) -> Self {
        Self::from_vocab(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn to_vocab_text(&self) -> String {
        let mut out = String::new();
        for w in &self.vocab {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn token_id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.vocab
    }
}

fn split_words(line: &str) -> impl Iterator<Item = &str> {
    line.split_whitespace().flat_map(|word| {
        let trimmed = word.trim_end_matches(['.', '!', '?', ',']);
        let (head, tail) = word.split_at(trimmed.len());
        let head = (!head.is_empty()).then_some(head);
        head.into_iter()
            .chain(tail.char_indices().map(move |(i, c)| &tail[i..i + c.len_utf8()]))
    })
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (n, line) in text.split('\n').enumerate() {
            if n > 0 {
                out.push(1);
            }
            out.extend(split_words(line).map(|w| self.index.get(w).copied().unwrap_or(0)));
        }
        out
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let word = self
                .vocab
                .get(id as usize)
                .map(String::as_str)
                .unwrap_or(UNK);
            if word == NEWLINE {
                out.push('\n');
                continue;
            }
            if !out.is_empty() && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn name(&self) -> String {
        format!("word-{}", self.vocab.len())
    }
}

/// Token ids of ".", "!", "?" and newline, for those that encode to a
/// single known token.
pub fn default_stop_set(tok: &dyn Tokenizer) -> BTreeSet<TokenId> {
    [".", "!", "?", "\n"]
        .iter()
        .filter_map(|s| match tok.encode(s).as_slice() {
            [one] if tok.decode(&[*one]) == *s => Some(*one),
            _ => None,
        })
        .collect()
}
