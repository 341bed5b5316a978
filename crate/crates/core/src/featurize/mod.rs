//! Turns annotated instances into the two-sequence encoding the model reads:
//! `[CLS] <context window> [SEP] <mention> [SEP]`, padded to a fixed length.

mod cache;
mod vocab;

pub use cache::{read_cache, write_cache, CacheError};
pub use vocab::{build_vocab, tokenize, Tokenize, TokenizerVocab, CLS, PAD, SEP, UNK};

use crate::corpus::{AnnotatedInstance, Corpus, Document, EntityMention};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("corpus has no text to build a vocabulary from")]
    EmptyCorpus,
    #[error("hint needs {needed} positions but max_len is {max_len}")]
    HintTooLong { needed: usize, max_len: usize },
    #[error("instance {0} references a missing document")]
    MissingDocument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Characters of context kept before the first span.
    pub before: usize,
    /// Characters of context kept after the last span.
    pub after: usize,
    pub max_len: usize,
    /// Append the mention after the first separator.
    pub hint: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            before: 200,
            after: 50,
            max_len: 144,
            hint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub text: String,
    /// Mention spans relative to the window start.
    pub mention_char_offsets: Vec<(usize, usize)>,
    /// Window bounds in document coordinates.
    pub window_doc_span: (usize, usize),
}

pub fn extract_context(doc: &Document, mention: &EntityMention, before: usize, after: usize) -> ContextWindow {
    let start = mention.first_start().saturating_sub(before);
    let end = (mention.last_end() + after).min(doc.char_len());
    ContextWindow {
        text: doc.slice(start, end).to_string(),
        mention_char_offsets: mention
            .spans
            .iter()
            .map(|s| (s.start - start, s.end - start))
            .collect(),
        window_doc_span: (start, end),
    }
}

/// First sequence is the window; second is the mention surfaces joined by
/// one space, or empty without the hint.
pub fn build_pair(window: &ContextWindow, mention: &EntityMention, hint: bool) -> (String, String) {
    let second = if hint { mention.surface.join(" ") } else { String::new() };
    (window.text.clone(), second)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub instance_id: String,
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Gold label index per modifier; present exactly for active heads.
    pub gold: BTreeMap<String, usize>,
    pub head_mask: BTreeMap<String, bool>,
    pub window_doc_span: (usize, usize),
}

impl EncodedExample {
    /// Number of leading positions up to and including the last attended one.
    pub fn attended_len(&self) -> usize {
        self.attention_mask
            .iter()
            .rposition(|&m| m != 0)
            .map_or(1, |p| p + 1)
    }

    pub fn is_active(&self, modifier: &str) -> bool {
        self.head_mask.get(modifier).copied().unwrap_or(false)
    }
}

/// Encodes a pair. Over-long first sequences lose tokens from the left; the
/// second sequence and its separator are always kept.
pub fn encode<T: Tokenize + ?Sized>(
    pair: (&str, &str),
    vocab: &T,
    gold: BTreeMap<String, usize>,
    head_mask: BTreeMap<String, bool>,
    max_len: usize,
) -> Result<EncodedExample, FeaturizeError> {
    let first = vocab.token_ids(pair.0);
    let second = vocab.token_ids(pair.1);
    let hint = !pair.1.is_empty();
    let fixed = 2 + if hint { second.len() + 1 } else { 0 };
    if fixed > max_len {
        return Err(FeaturizeError::HintTooLong { needed: fixed, max_len });
    }
    let keep = first.len().min(max_len - fixed);
    let first = &first[first.len() - keep..];

    let mut token_ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(first);
    token_ids.push(SEP);
    segment_ids.resize(token_ids.len(), 0);
    if hint {
        token_ids.extend_from_slice(&second);
        token_ids.push(SEP);
        segment_ids.resize(token_ids.len(), 1);
    }
    let real = token_ids.len();
    let mut attention_mask = vec![1u8; real];
    token_ids.resize(max_len, PAD);
    segment_ids.resize(max_len, 0);
    attention_mask.resize(max_len, 0);
    Ok(EncodedExample {
        instance_id: String::new(),
        token_ids,
        segment_ids,
        attention_mask,
        gold,
        head_mask,
        window_doc_span: (0, 0),
    })
}

/// Gold indices and head mask for one instance against the corpus schema.
pub fn resolve_targets(corpus: &Corpus, inst: &AnnotatedInstance) -> (BTreeMap<String, usize>, BTreeMap<String, bool>) {
    let mut gold = BTreeMap::new();
    let mut mask = BTreeMap::new();
    for m in &corpus.schema.modifiers {
        let idx = corpus
            .resolved_label(inst, &m.name)
            .and_then(|l| m.label_index(l));
        mask.insert(m.name.clone(), idx.is_some());
        if let Some(i) = idx {
            gold.insert(m.name.clone(), i);
        }
    }
    (gold, mask)
}

pub fn encode_instance<T: Tokenize + ?Sized>(
    corpus: &Corpus,
    inst: &AnnotatedInstance,
    vocab: &T,
    cfg: &FeatureConfig,
) -> Result<EncodedExample, FeaturizeError> {
    let doc = corpus
        .document(&inst.mention.doc_id)
        .ok_or_else(|| FeaturizeError::MissingDocument(inst.id.clone()))?;
    let window = extract_context(doc, &inst.mention, cfg.before, cfg.after);
    let (first, second) = build_pair(&window, &inst.mention, cfg.hint);
    let (gold, mask) = resolve_targets(corpus, inst);
    let mut ex = encode((&first, &second), vocab, gold, mask, cfg.max_len)?;
    ex.instance_id = inst.id.clone();
    ex.window_doc_span = window.window_doc_span;
    Ok(ex)
}

/// Encodes every instance of `corpus` in order.
pub fn encode_corpus<T: Tokenize + Sync + ?Sized>(
    corpus: &Corpus,
    vocab: &T,
    cfg: &FeatureConfig,
) -> Result<Vec<EncodedExample>, FeaturizeError> {
    use rayon::prelude::*;
    corpus
        .instances
        .par_iter()
        .map(|inst| encode_instance(corpus, inst, vocab, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Span, SynthConfig};
    use proptest::prelude::*;

    fn doc_of_len(n: usize) -> Document {
        Document::new("d", "x".repeat(n))
    }

    #[test]
    fn window_arithmetic() {
        let doc = doc_of_len(1000);
        let m = EntityMention::from_spans(&doc, vec![Span::new(300, 310)]).unwrap();
        let w = extract_context(&doc, &m, 200, 50);
        assert_eq!(w.window_doc_span, (100, 360));
        assert_eq!(w.mention_char_offsets, vec![(200, 210)]);

        let m = EntityMention::from_spans(&doc, vec![Span::new(0, 5)]).unwrap();
        assert_eq!(extract_context(&doc, &m, 200, 50).window_doc_span, (0, 55));

        let m = EntityMention::from_spans(&doc, vec![Span::new(10, 15), Span::new(980, 990)]).unwrap();
        let w = extract_context(&doc, &m, 200, 50);
        assert_eq!(w.window_doc_span, (0, 1000));
        assert_eq!(w.mention_char_offsets, vec![(10, 15), (980, 990)]);
    }

    #[test]
    fn pair_carries_mention_hint() {
        let text = "The patient was found to be in fulminant liver failure. There she was having hallucinations, suicidal ideations and tremor";
        let doc = Document::new("d", text);
        let start = text.find("hallucinations").unwrap();
        let m = EntityMention::from_spans(&doc, vec![Span::new(start, start + 14)]).unwrap();
        let w = extract_context(&doc, &m, 200, 50);
        let (first, second) = build_pair(&w, &m, true);
        assert_eq!(second, "hallucinations");
        assert!(first.contains("suicidal ideations"));
        assert_eq!(build_pair(&w, &m, false).1, "");
    }

    #[test]
    fn discontiguous_surfaces_join_with_space() {
        let doc = Document::new("d", "left leg with swelling");
        let m = EntityMention::from_spans(&doc, vec![Span::new(0, 8), Span::new(14, 22)]).unwrap();
        let w = extract_context(&doc, &m, 200, 50);
        assert_eq!(build_pair(&w, &m, true).1, "left leg swelling");
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    fn open_vocab() -> TokenizerVocab {
        TokenizerVocab::from_tokens((0..300).map(|i| format!("w{i}")), true)
    }

    #[test]
    fn short_pair_layout() {
        let v = open_vocab();
        let ex = encode((&words(3), "w7"), &v, BTreeMap::new(), BTreeMap::new(), 144).unwrap();
        assert_eq!(ex.token_ids.len(), 144);
        assert_eq!(ex.attention_mask.iter().filter(|&&m| m == 1).count(), 7);
        assert_eq!(ex.token_ids[0], CLS);
        assert_eq!(ex.token_ids[4], SEP);
        assert_eq!(ex.token_ids[6], SEP);
        assert_eq!(&ex.segment_ids[..7], &[0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(ex.token_ids.iter().filter(|&&t| t == SEP).count(), 2);
    }

    #[test]
    fn long_first_sequence_is_left_truncated() {
        let v = open_vocab();
        let ex = encode((&words(200), "w1 w2"), &v, BTreeMap::new(), BTreeMap::new(), 144).unwrap();
        assert_eq!(ex.token_ids.len(), 144);
        assert!(ex.attention_mask.iter().all(|&m| m == 1));
        let first: Vec<u32> = ex.token_ids[1..140].to_vec();
        let expected: Vec<u32> = v.token_ids(&words(200))[61..].to_vec();
        assert_eq!(first.len(), 139);
        assert_eq!(first, expected);
        assert_eq!(ex.token_ids[140], SEP);
        assert_eq!(&ex.token_ids[141..], &[v.id("w1"), v.id("w2"), SEP]);
    }

    #[test]
    fn no_hint_has_single_sep_and_segment_zero() {
        let v = open_vocab();
        let ex = encode((&words(5), ""), &v, BTreeMap::new(), BTreeMap::new(), 144).unwrap();
        assert_eq!(ex.token_ids.iter().filter(|&&t| t == SEP).count(), 1);
        assert!(ex.segment_ids.iter().all(|&s| s == 0));
    }

    #[test]
    fn oversized_hint_is_rejected() {
        let v = open_vocab();
        let err = encode(("w1", &words(10)), &v, BTreeMap::new(), BTreeMap::new(), 12).unwrap_err();
        assert!(matches!(err, FeaturizeError::HintTooLong { needed: 13, max_len: 12 }));
    }

    #[test]
    fn corpus_encoding_masks_inapplicable_heads() {
        let mut c = crate::corpus::generate_synthetic(&SynthConfig::small_demo(20), 1).unwrap().corpus;
        c.applicable_modifiers.remove("Uncertainty");
        for inst in &mut c.instances {
            inst.labels.remove("Uncertainty");
        }
        let v = build_vocab(&c, 1).unwrap();
        let exs = encode_corpus(&c, &v, &FeatureConfig::default()).unwrap();
        for ex in &exs {
            assert!(ex.is_active("Negation"));
            assert!(!ex.is_active("Uncertainty"));
            assert!(!ex.gold.contains_key("Uncertainty"));
            for (m, &on) in &ex.head_mask {
                assert!(!on || ex.gold.contains_key(m));
            }
        }
        assert_eq!(exs, encode_corpus(&c, &v, &FeatureConfig::default()).unwrap());
    }

    proptest! {
        #[test]
        fn encode_is_total_and_keeps_hint(n1 in 0usize..260, n2 in 1usize..8, max_len in 12usize..160) {
            let v = open_vocab();
            let second = words(n2);
            let ex = encode((&words(n1), &second), &v, BTreeMap::new(), BTreeMap::new(), max_len).unwrap();
            prop_assert_eq!(ex.token_ids.len(), max_len);
            prop_assert_eq!(ex.segment_ids.len(), max_len);
            prop_assert_eq!(ex.attention_mask.len(), max_len);
            prop_assert!(ex.attention_mask.windows(2).all(|w| w[0] >= w[1]));
            let real = ex.attended_len();
            let mut tail = v.token_ids(&second);
            tail.push(SEP);
            prop_assert_eq!(&ex.token_ids[real - tail.len()..real], tail.as_slice());
            prop_assert_eq!(real, (n1 + n2 + 3).min(max_len));
        }

        #[test]
        fn window_contains_mention_at_offsets(len in 1usize..600, a in 0usize..600, w in 1usize..20, before in 0usize..300, after in 0usize..100) {
            let doc = Document::new("d", (0..len).map(|i| (b'a' + (i % 26) as u8) as char).collect::<String>());
            let start = a % len;
            let end = (start + w).min(len);
            let m = EntityMention::from_spans(&doc, vec![Span::new(start, end)]).unwrap();
            let win = extract_context(&doc, &m, before, after);
            let (s, e) = win.mention_char_offsets[0];
            let chars: Vec<char> = win.text.chars().collect();
            prop_assert_eq!(chars[s..e].iter().collect::<String>(), m.surface[0].clone());
            prop_assert_eq!(win.window_doc_span.0, start.saturating_sub(before));
            prop_assert_eq!(win.window_doc_span.1, (end + after).min(len));
        }
    }
}
