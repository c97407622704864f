//! Whitespace + lowercase tokenizer with a corpus-built vocabulary.
//!
//! Frequent words are whole tokens. Words below the frequency cut are split
//! into fixed-width character pieces (`abc`, `##def`, ...), so one word may
//! map to several subwords and the encoder keeps only the first one as the
//! word's representation.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::Result;

pub const UNK: u32 = 0;
pub const UNK_TOKEN: &str = "[UNK]";
const PIECE_CHARS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

fn pieces(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .chunks(PIECE_CHARS)
        .enumerate()
        .map(|(i, c)| {
            let s: String = c.iter().collect();
            if i == 0 {
                s
            } else {
                format!("##{s}")
            }
        })
        .collect()
}

/// Split a relation label name into words: `IS_LOCATED_IN` → `is located in`.
pub fn label_words(name: &str) -> Vec<String> {
    name.split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Vocab {
    /// Build from raw words. Words seen at least `min_count` times become
    /// whole tokens (at most `max_words` of them, most frequent first);
    /// the pieces of every other word are added instead.
    pub fn build<'a>(
        words: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_words: Option<usize>,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for w in words {
            *counts.entry(w.to_lowercase()).or_default() += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut vocab = Self::from_tokens(vec![UNK_TOKEN.to_string()]);
        let limit = max_words.unwrap_or(usize::MAX);
        let mut whole = 0;
        let mut rare = Vec::new();
        for (w, c) in ranked {
            if c >= min_count && whole < limit {
                vocab.insert(w);
                whole += 1;
            } else {
                rare.push(w);
            }
        }
        for w in rare {
            for p in pieces(&w) {
                vocab.insert(p);
            }
        }
        vocab
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut vocab = Self {
            tokens: Vec::with_capacity(tokens.len()),
            index: HashMap::with_capacity(tokens.len()),
        };
        for t in tokens {
            vocab.insert(t);
        }
        vocab
    }

    fn insert(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len() as u32);
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let lower = word.to_lowercase();
        if let Some(&id) = self.index.get(&lower) {
            return vec![id];
        }
        let ids: Vec<u32> = pieces(&lower)
            .iter()
            .map(|p| self.index.get(p).copied().unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn tokenize_label(&self, name: &str) -> Vec<u32> {
        label_words(name)
            .iter()
            .flat_map(|w| self.tokenize_word(w))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let tokens = f.lines().collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self::from_tokens(tokens))
    }
}
