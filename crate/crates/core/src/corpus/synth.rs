//! Synthetic corpora with planted cue phrases.
//!
//! Every non-default label owns one or more cue phrases. An instance whose
//! gold label for a modifier is non-default gets one of that label's cues
//! planted shortly before the mention; default labels get no cue. With a
//! zero noise rate the labels are therefore recoverable from the context
//! window alone. Filler words are pseudo-words drawn from a vocabulary that
//! depends only on `vocab_size`, so corpora generated from different
//! configs share their filler vocabulary.

use super::{
    AnnotatedInstance, Corpus, CorpusError, Document, EntityMention, ModifierDef, ModifierSchema,
    Result, Span,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueRule {
    pub modifier: String,
    pub label: String,
    pub phrase: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthLayout {
    /// One mention per document; cues sit somewhere in the few words
    /// before the mention.
    #[default]
    Window,
    /// Two mentions share one short document and so one context window;
    /// each mention's cues immediately precede it.
    SharedWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub modifiers: Vec<ModifierDef>,
    /// Modifiers the corpus declares as annotated; all when absent.
    #[serde(default)]
    pub applicable: Option<Vec<String>>,
    pub cues: Vec<CueRule>,
    pub num_instances: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    /// Probability that an instance carries one distractor cue of a label
    /// it does not have.
    #[serde(default)]
    pub noise_rate: f64,
    /// Probability that a modifier takes its default label.
    #[serde(default = "default_rate")]
    pub default_rate: f64,
    /// Fraction of mentions made discontiguous (Window layout only).
    #[serde(default)]
    pub discontiguous_rate: f64,
    #[serde(default)]
    pub layout: SynthLayout,
}

fn default_rate() -> f64 {
    0.5
}

/// Cue phrases and layout a corpus was generated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueTable {
    pub layout: SynthLayout,
    pub rules: Vec<CueRule>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub cues: CueTable,
}

const TERMS: &[&str] = &[
    "cough",
    "fever",
    "rash",
    "nausea",
    "headache",
    "dyspnea",
    "edema",
    "fatigue",
    "wheezing",
    "vomiting",
    "seizure",
    "anemia",
    "insomnia",
    "tremor",
    "dizziness",
    "chest pain",
    "back pain",
    "sore throat",
    "joint swelling",
    "suicidal ideations",
];

fn cue(modifier: &str, label: &str, phrase: &str) -> CueRule {
    CueRule {
        modifier: modifier.into(),
        label: label.into(),
        phrase: phrase.into(),
    }
}

fn negation() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new("Negation", &["no", "yes"], "no"),
        vec![cue("Negation", "yes", "denies")],
    )
}

fn subject() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new("Subject", &["patient", "family_member", "other"], "patient"),
        vec![cue("Subject", "family_member", "mother"), cue("Subject", "other", "donor")],
    )
}

fn uncertainty() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new("Uncertainty", &["no", "yes"], "no"),
        vec![cue("Uncertainty", "yes", "possible")],
    )
}

fn severity() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new("Severity", &["unmarked", "slight", "moderate", "severe"], "unmarked"),
        vec![
            cue("Severity", "slight", "mild"),
            cue("Severity", "moderate", "moderate"),
            cue("Severity", "severe", "severe"),
        ],
    )
}

fn course() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new(
            "Course",
            &["unmarked", "changed", "increased", "decreased", "improved", "worsened", "resolved"],
            "unmarked",
        ),
        vec![
            cue("Course", "changed", "changing"),
            cue("Course", "increased", "rising"),
            cue("Course", "decreased", "falling"),
            cue("Course", "improved", "improving"),
            cue("Course", "worsened", "worsening"),
            cue("Course", "resolved", "resolved"),
        ],
    )
}

fn conditional() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new("Conditional", &["false", "true"], "false"),
        vec![cue("Conditional", "true", "if")],
    )
}

fn generic() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new("Generic", &["false", "true"], "false"),
        vec![cue("Generic", "true", "any")],
    )
}

fn doctime() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new("DocTime", &["overlap", "before", "after"], "overlap"),
        vec![cue("DocTime", "before", "previously"), cue("DocTime", "after", "tomorrow")],
    )
}

fn illicit() -> (ModifierDef, Vec<CueRule>) {
    (
        ModifierDef::new("IllicitDrugUse", &["false", "true"], "false"),
        vec![cue("IllicitDrugUse", "true", "street")],
    )
}

impl SynthConfig {
    fn from_parts(name: &str, parts: Vec<(ModifierDef, Vec<CueRule>)>, n: usize) -> Self {
        let (modifiers, cues): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        Self {
            name: name.into(),
            modifiers,
            applicable: None,
            cues: cues.into_iter().flatten().collect(),
            num_instances: n,
            vocab_size: 300,
            noise_rate: 0.0,
            default_rate: 0.5,
            discontiguous_rate: 0.1,
            layout: SynthLayout::Window,
        }
    }

    /// Two binary modifiers (negation, uncertainty).
    pub fn small_demo(n: usize) -> Self {
        Self::from_parts("demo", vec![negation(), uncertainty()], n)
    }

    /// Seven modifiers shaped like the ShARe disorder attributes.
    pub fn share_like(n: usize) -> Self {
        Self::from_parts(
            "shr",
            vec![negation(), subject(), uncertainty(), severity(), course(), conditional(), generic()],
            n,
        )
    }

    /// Six modifiers shaped like the OUD corpus attributes; shares
    /// negation, subject, uncertainty and severity with [`Self::share_like`].
    pub fn oud_like(n: usize) -> Self {
        Self::from_parts(
            "oud",
            vec![negation(), subject(), uncertainty(), severity(), doctime(), illicit()],
            n,
        )
    }

    /// Keeps only the named modifiers and their cues, in this config's order.
    pub fn with_modifiers(mut self, names: &[&str]) -> Self {
        self.modifiers.retain(|m| names.contains(&m.name.as_str()));
        self.cues.retain(|c| names.contains(&c.modifier.as_str()));
        self
    }

    pub fn validate(&self) -> Result<ModifierSchema> {
        let invalid = |s: String| CorpusError::InvalidConfig(s);
        let schema = ModifierSchema::new(self.modifiers.clone()).map_err(|e| invalid(e.to_string()))?;
        if schema.is_empty() {
            return Err(invalid("no modifiers".into()));
        }
        if self.num_instances == 0 {
            return Err(invalid("num_instances must be positive".into()));
        }
        if self.vocab_size < 10 {
            return Err(invalid("vocab_size must be at least 10".into()));
        }
        for (what, r) in [
            ("noise_rate", self.noise_rate),
            ("default_rate", self.default_rate),
            ("discontiguous_rate", self.discontiguous_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid(format!("{what} must lie in [0, 1]")));
            }
        }
        let mut phrases = HashSet::new();
        for c in &self.cues {
            let def = schema
                .get(&c.modifier)
                .ok_or_else(|| invalid(format!("cue for unknown modifier {}", c.modifier)))?;
            if def.label_index(&c.label).is_none() {
                return Err(invalid(format!("cue for unknown label {}:{}", c.modifier, c.label)));
            }
            if c.label == def.default_label {
                return Err(invalid(format!("default label {}:{} cannot have a cue", c.modifier, c.label)));
            }
            let words: Vec<&str> = c.phrase.split(' ').collect();
            if words.iter().any(|w| w.is_empty() || !w.chars().all(|ch| ch.is_ascii_lowercase())) {
                return Err(invalid(format!("cue {:?} must be lowercase words separated by single spaces", c.phrase)));
            }
            if !phrases.insert(c.phrase.as_str()) {
                return Err(invalid(format!("cue {:?} used twice", c.phrase)));
            }
            if TERMS.iter().any(|t| t.split(' ').any(|w| words.contains(&w))) {
                return Err(invalid(format!("cue {:?} collides with a mention term", c.phrase)));
            }
        }
        for m in &schema.modifiers {
            for l in &m.labels {
                if *l != m.default_label && !self.cues.iter().any(|c| c.modifier == m.name && &c.label == l) {
                    return Err(invalid(format!("label {}:{l} has no cue", m.name)));
                }
            }
        }
        if let Some(app) = &self.applicable {
            for a in app {
                if schema.get(a).is_none() {
                    return Err(invalid(format!("applicable modifier {a} not in schema")));
                }
            }
        }
        Ok(schema)
    }

    pub fn cue_words(&self) -> BTreeSet<String> {
        self.cues
            .iter()
            .flat_map(|c| c.phrase.split(' ').map(str::to_string))
            .collect()
    }
}

/// Deterministic pseudo-word filler vocabulary of `size` words, avoiding
/// `reserved`.
pub fn filler_vocabulary(size: usize, reserved: &BTreeSet<String>) -> Vec<String> {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f111);
    let term_words: HashSet<&str> = TERMS.iter().flat_map(|t| t.split(' ')).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONS.choose(&mut rng).unwrap() as char);
            w.push(*VOWELS.choose(&mut rng).unwrap() as char);
        }
        if reserved.contains(&w) || term_words.contains(w.as_str()) || !seen.insert(w.clone()) {
            continue;
        }
        out.push(w);
    }
    out
}

struct TextBuilder {
    text: String,
    chars: usize,
}

impl TextBuilder {
    fn new() -> Self {
        Self {
            text: String::new(),
            chars: 0,
        }
    }

    /// Appends `word` preceded by a space when needed; returns its span.
    fn word(&mut self, word: &str) -> Span {
        if !self.text.is_empty() {
            self.text.push(' ');
            self.chars += 1;
        }
        let start = self.chars;
        self.text.push_str(word);
        self.chars += word.chars().count();
        Span::new(start, self.chars)
    }

    fn filler<R: Rng>(&mut self, rng: &mut R, vocab: &[String], n: usize) {
        for _ in 0..n {
            let w = vocab.choose(rng).unwrap();
            self.word(w);
            if rng.random_bool(0.08) {
                let p = if rng.random_bool(0.5) { "," } else { "." };
                self.text.push_str(p);
                self.chars += 1;
            }
        }
    }

    /// Appends a mention term, optionally split around a filler word.
    fn mention<R: Rng>(&mut self, rng: &mut R, vocab: &[String], term: &str, split: bool) -> Vec<Span> {
        let words: Vec<&str> = term.split(' ').collect();
        if split && words.len() == 2 {
            let a = self.word(words[0]);
            self.word(vocab.choose(rng).unwrap());
            let b = self.word(words[1]);
            vec![a, b]
        } else {
            let first = self.word(words[0]);
            let mut last = first;
            for w in &words[1..] {
                last = self.word(w);
            }
            vec![Span::new(first.start, last.end)]
        }
    }
}

/// Draws labels and the cue phrases that encode them.
fn draw_labels<R: Rng>(
    rng: &mut R,
    schema: &ModifierSchema,
    applicable: &BTreeSet<String>,
    cues: &[CueRule],
    default_rate: f64,
) -> (BTreeMap<String, String>, Vec<String>) {
    let mut labels = BTreeMap::new();
    let mut planted = Vec::new();
    for m in &schema.modifiers {
        if !applicable.contains(&m.name) {
            continue;
        }
        let label = if rng.random_bool(default_rate) {
            m.default_label.clone()
        } else {
            let others: Vec<&String> = m.labels.iter().filter(|l| **l != m.default_label).collect();
            (*others.choose(rng).unwrap()).clone()
        };
        if label != m.default_label {
            let options: Vec<&CueRule> = cues.iter().filter(|c| c.modifier == m.name && c.label == label).collect();
            planted.push(options.choose(rng).unwrap().phrase.clone());
        }
        labels.insert(m.name.clone(), label);
    }
    (labels, planted)
}

fn distractor<R: Rng>(rng: &mut R, labels: &BTreeMap<String, String>, cues: &[CueRule]) -> Option<String> {
    let wrong: Vec<&CueRule> = cues
        .iter()
        .filter(|c| labels.get(&c.modifier).is_some_and(|l| *l != c.label))
        .collect();
    wrong.choose(rng).map(|c| c.phrase.clone())
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    let schema = config.validate()?;
    let applicable: BTreeSet<String> = match &config.applicable {
        Some(a) => a.iter().cloned().collect(),
        None => schema.names().map(str::to_string).collect(),
    };
    let vocab = filler_vocabulary(config.vocab_size, &config.cue_words());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = BTreeMap::new();
    let mut instances = Vec::new();

    let mut doc_no = 0;
    while instances.len() < config.num_instances {
        let doc_id = format!("doc{doc_no:05}");
        doc_no += 1;
        let mut tb = TextBuilder::new();
        let mut mentions: Vec<(Vec<Span>, BTreeMap<String, String>)> = Vec::new();
        match config.layout {
            SynthLayout::Window => {
                let far = rng.random_range(0..=30);
                tb.filler(&mut rng, &vocab, far);
                let (labels, mut planted) = draw_labels(&mut rng, &schema, &applicable, &config.cues, config.default_rate);
                if rng.random_bool(config.noise_rate) {
                    planted.extend(distractor(&mut rng, &labels, &config.cues));
                }
                // cues interleaved with up to six filler words right before the mention
                let near = rng.random_range(1..=6);
                let mut slots: Vec<Option<String>> = vec![None; near];
                slots.extend(planted.into_iter().map(Some));
                slots.shuffle_in_place(&mut rng);
                for s in slots {
                    match s {
                        Some(p) => {
                            tb.word(&p);
                        }
                        None => tb.filler(&mut rng, &vocab, 1),
                    }
                }
                let term = TERMS.choose(&mut rng).unwrap();
                let split = rng.random_bool(config.discontiguous_rate);
                let spans = tb.mention(&mut rng, &vocab, term, split);
                mentions.push((spans, labels));
                let after = rng.random_range(2..=12);
                tb.filler(&mut rng, &vocab, after);
            }
            SynthLayout::SharedWindow => {
                let pair = if config.num_instances - instances.len() >= 2 { 2 } else { 1 };
                let single: Vec<&str> = TERMS.iter().copied().filter(|t| !t.contains(' ')).collect();
                let terms: Vec<&str> = single.choose_multiple(&mut rng, pair).copied().collect();
                for (k, term) in terms.iter().enumerate() {
                    if k > 0 {
                        tb.filler(&mut rng, &vocab, 1);
                    }
                    let (labels, mut planted) =
                        draw_labels(&mut rng, &schema, &applicable, &config.cues, config.default_rate);
                    if rng.random_bool(config.noise_rate) {
                        planted.extend(distractor(&mut rng, &labels, &config.cues));
                    }
                    planted.shuffle_in_place(&mut rng);
                    for p in &planted {
                        tb.word(p);
                    }
                    let spans = tb.mention(&mut rng, &vocab, term, false);
                    mentions.push((spans, labels));
                }
                let after = rng.random_range(0..=2);
                tb.filler(&mut rng, &vocab, after);
            }
        }
        let doc = Document::new(&doc_id, tb.text);
        for (k, (spans, labels)) in mentions.into_iter().enumerate() {
            let mention = EntityMention::from_spans(&doc, spans)?;
            instances.push(AnnotatedInstance {
                id: format!("{doc_id}/T{}", k + 1),
                mention,
                labels,
            });
        }
        documents.insert(doc_id, doc);
    }

    let corpus = Corpus {
        name: config.name.clone(),
        schema,
        documents,
        instances,
        applicable_modifiers: applicable,
        document_applicable: BTreeMap::new(),
    };
    corpus.validate()?;
    Ok(SynthOutput {
        corpus,
        cues: CueTable {
            layout: config.layout,
            rules: config.cues.clone(),
        },
    })
}

trait ShuffleInPlace {
    fn shuffle_in_place<R: Rng>(&mut self, rng: &mut R);
}

impl<T> ShuffleInPlace for Vec<T> {
    fn shuffle_in_place<R: Rng>(&mut self, rng: &mut R) {
        use rand::seq::SliceRandom;
        self.shuffle(rng);
    }
}
