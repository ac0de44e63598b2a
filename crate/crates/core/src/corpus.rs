//! Tokenized document store.

use crate::io::{checksum64, PutLe};
use crate::tokenizer::{TokenId, Tokenizer};

/// Documents of token ids. Positions are addressed as `(doc, pos)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<Vec<TokenId>>,
}

impl Corpus {
    pub fn new(docs: Vec<Vec<TokenId>>) -> Self {
        Self { docs }
    }

    /// Splits `text` into documents at blank lines and tokenizes each.
    pub fn from_text(text: &str, tok: &dyn Tokenizer) -> Self {
        let mut docs = Vec::new();
        let mut current = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    docs.push(tok.encode(&current.join("\n")));
                    current.clear();
                }
            } else {
                current.push(line);
            }
        }
        if !current.is_empty() {
            docs.push(tok.encode(&current.join("\n")));
        }
        Self { docs }
    }

    pub fn docs(&self) -> &[Vec<TokenId>] {
        &self.docs
    }

    pub fn doc(&self, i: usize) -> &[TokenId] {
        &self.docs[i]
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_tokens() == 0
    }

    pub fn n_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Content hash binding caches to this exact token stream.
    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 + self.n_tokens() * 4);
        bytes.put_u64(self.docs.len() as u64);
        for d in &self.docs {
            bytes.put_u64(d.len() as u64);
            for &t in d {
                bytes.put_u32(t);
            }
        }
        checksum64(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WordTokenizer;

    #[test]
    fn blank_lines_split_documents() {
        let tok = WordTokenizer::from_vocab(["a", "b", "."]);
        let c = Corpus::from_text("a b .\nb .\n\n\na .\n", &tok);
        assert_eq!(c.len(), 2);
        assert_eq!(c.doc(0).len(), 6);
        assert_ne!(c.hash(), Corpus::new(vec![c.doc(1).to_vec(), c.doc(0).to_vec()]).hash());
    }
}
