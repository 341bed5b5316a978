//! Word-level tokenizer with reserved special tokens.

use super::FeaturizeError;
use crate::corpus::Corpus;
use crate::util::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

/// Anything that maps text to token ids in the special-token convention
/// above.
pub trait Tokenize {
    fn token_ids(&self, text: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
}

/// Splits on whitespace; runs of alphanumerics form words and every other
/// character is its own token.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if lowercase {
                cur.extend(ch.to_lowercase());
            } else {
                cur.push(ch);
            }
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct TokenizerVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    lowercase: bool,
    tokens: Vec<String>,
}

impl From<VocabFile> for TokenizerVocab {
    fn from(f: VocabFile) -> Self {
        let index = f
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens: f.tokens,
            index,
            lowercase: f.lowercase,
        }
    }
}

impl From<TokenizerVocab> for VocabFile {
    fn from(v: TokenizerVocab) -> Self {
        Self {
            lowercase: v.lowercase,
            tokens: v.tokens,
        }
    }
}

impl TokenizerVocab {
    /// Specials followed by `tokens` in the given order (duplicates skipped).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>, lowercase: bool) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len() as u32);
                all.push(t);
            }
        }
        Self {
            tokens: all,
            index,
            lowercase,
        }
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a (tokenized) word; UNK when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("vocab serializes"))
    }
}

impl Tokenize for TokenizerVocab {
    fn token_ids(&self, text: &str) -> Vec<u32> {
        tokenize(text, self.lowercase)
            .iter()
            // tokenized text never spells a special, but a literal "[CLS]" in a
            // vocabulary file must not leak through either
            .map(|t| match self.id(t) {
                id if id < SPECIALS.len() as u32 => UNK,
                id => id,
            })
            .collect()
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}

/// Lowercased vocabulary over every document of `corpus`, ordered by
/// descending frequency then lexicographically. Tokens seen fewer than
/// `min_freq` times are left out (and encode as UNK).
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Result<TokenizerVocab, FeaturizeError> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus.documents.values() {
        for t in tokenize(&doc.text, true) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(FeaturizeError::EmptyCorpus);
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_freq.max(1)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(TokenizerVocab::from_tokens(entries.into_iter().map(|(t, _)| t), true))
}
