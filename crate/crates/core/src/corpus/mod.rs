//! Annotated corpora of entity mentions with modifier labels.
//!
//! A [`Corpus`] couples a [`ModifierSchema`] with documents and the
//! [`AnnotatedInstance`]s that point into them. Spans are character offsets
//! (not bytes), half-open `[start, end)`.

mod jsonl;
mod merge;
mod split;
mod standoff;
pub mod synth;

pub use jsonl::{read_jsonl, write_jsonl, INSTANCES_FILE};
pub use merge::merge_corpora;
pub use split::{split_corpus, SplitMode, SplitRatios};
pub use standoff::{parse_standoff, write_standoff};
pub use synth::{generate_synthetic, CueRule, CueTable, SynthConfig, SynthLayout, SynthOutput};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{lineno}: malformed line: {reason}")]
    MalformedLine {
        file: PathBuf,
        lineno: usize,
        reason: String,
    },
    #[error("{doc_id}: span ({start}, {end}) out of bounds for document of length {len}")]
    OffsetOutOfBounds {
        doc_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{doc_id}: annotation text {annotated:?} does not match document text {actual:?}")]
    SurfaceMismatch {
        doc_id: String,
        annotated: String,
        actual: String,
    },
    #[error("unknown modifier {0:?}")]
    UnknownModifier(String),
    #[error("unknown label {label:?} for modifier {modifier:?}")]
    UnknownLabel { modifier: String, label: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error("corpus has no instances")]
    EmptyCorpus,
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("schema conflict on modifier {modifier:?}: {labels_a:?} vs {labels_b:?}")]
    SchemaConflict {
        modifier: String,
        labels_a: Vec<String>,
        labels_b: Vec<String>,
    },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("{} errors:\n{}", .0.len(), .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Multiple(Vec<CorpusError>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CorpusError {
    /// Collapses a list of errors into one, or `None` if the list is empty.
    pub(crate) fn collect(mut errors: Vec<CorpusError>) -> Option<CorpusError> {
        match errors.len() {
            0 => None,
            1 => errors.pop(),
            _ => Some(CorpusError::Multiple(errors)),
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One modifier type with its ordered label list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifierDef {
    pub name: String,
    pub labels: Vec<String>,
    #[serde(rename = "default")]
    pub default_label: String,
}

impl ModifierDef {
    pub fn new(name: &str, labels: &[&str], default_label: &str) -> Self {
        Self {
            name: name.to_string(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            default_label: default_label.to_string(),
        }
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn default_index(&self) -> usize {
        self.label_index(&self.default_label)
            .expect("validated schema: default label is a member")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifierSchema {
    pub modifiers: Vec<ModifierDef>,
}

impl ModifierSchema {
    pub fn new(modifiers: Vec<ModifierDef>) -> Result<Self> {
        let schema = Self { modifiers };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for m in &self.modifiers {
            if m.name.is_empty() || m.name.contains(char::is_whitespace) {
                return Err(CorpusError::InvalidSchema(format!(
                    "modifier name {:?} must be non-empty without whitespace",
                    m.name
                )));
            }
            if !names.insert(m.name.as_str()) {
                return Err(CorpusError::InvalidSchema(format!(
                    "duplicate modifier {:?}",
                    m.name
                )));
            }
            if m.labels.len() < 2 {
                return Err(CorpusError::InvalidSchema(format!(
                    "modifier {:?} needs at least 2 labels",
                    m.name
                )));
            }
            let mut seen = HashSet::new();
            for l in &m.labels {
                if l.is_empty() || l.contains(char::is_whitespace) {
                    return Err(CorpusError::InvalidSchema(format!(
                        "label {l:?} of {:?} must be non-empty without whitespace",
                        m.name
                    )));
                }
                if !seen.insert(l.as_str()) {
                    return Err(CorpusError::InvalidSchema(format!(
                        "duplicate label {l:?} in modifier {:?}",
                        m.name
                    )));
                }
            }
            if m.label_index(&m.default_label).is_none() {
                return Err(CorpusError::InvalidSchema(format!(
                    "default {:?} of {:?} is not one of its labels",
                    m.default_label, m.name
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ModifierDef> {
        self.modifiers.iter().find(|m| m.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.modifiers.iter().position(|m| m.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.modifiers.iter().map(|m| m.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.modifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modifiers.is_empty()
    }

    /// Sub-schema restricted to `names`, keeping this schema's order.
    pub fn restrict<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let wanted: BTreeSet<&str> = names.into_iter().collect();
        for w in &wanted {
            if self.get(w).is_none() {
                return Err(CorpusError::UnknownModifier(w.to_string()));
            }
        }
        Ok(Self {
            modifiers: self
                .modifiers
                .iter()
                .filter(|m| wanted.contains(m.name.as_str()))
                .cloned()
                .collect(),
        })
    }
}

/// A document. Offsets into it are character indices.
#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub text: String,
    // byte offset of every char boundary, including the end
    boundaries: Vec<usize>,
}

impl PartialEq for Document {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.text == other.text
    }
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let mut boundaries: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        boundaries.push(text.len());
        Self {
            id: id.into(),
            text,
            boundaries,
        }
    }

    /// Length in characters.
    pub fn char_len(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Substring by character offsets; panics when out of range.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        &self.text[self.boundaries[start]..self.boundaries[end]]
    }

    pub fn try_slice(&self, start: usize, end: usize) -> Option<&str> {
        (start <= end && end <= self.char_len()).then(|| self.slice(start, end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub doc_id: String,
    pub spans: Vec<Span>,
    pub surface: Vec<String>,
}

impl EntityMention {
    /// Builds a mention reading surfaces from `doc`, validating spans.
    pub fn from_spans(doc: &Document, spans: Vec<Span>) -> Result<Self> {
        check_spans(doc, &spans)?;
        let surface = spans
            .iter()
            .map(|s| doc.slice(s.start, s.end).to_string())
            .collect();
        Ok(Self {
            doc_id: doc.id.clone(),
            spans,
            surface,
        })
    }

    pub fn first_start(&self) -> usize {
        self.spans[0].start
    }

    pub fn last_end(&self) -> usize {
        self.spans[self.spans.len() - 1].end
    }
}

pub(crate) fn check_spans(doc: &Document, spans: &[Span]) -> Result<()> {
    if spans.is_empty() {
        return Err(CorpusError::Invalid(format!("{}: mention without spans", doc.id)));
    }
    let len = doc.char_len();
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end || s.end > len {
            return Err(CorpusError::OffsetOutOfBounds {
                doc_id: doc.id.clone(),
                start: s.start,
                end: s.end,
                len,
            });
        }
        if i > 0 && s.start < prev_end {
            return Err(CorpusError::Invalid(format!(
                "{}: spans overlap or are unsorted",
                doc.id
            )));
        }
        prev_end = s.end;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    /// `<doc_id>/<mention id>`, unique within a corpus.
    pub id: String,
    pub mention: EntityMention,
    /// Explicit annotations; a missing modifier means "not annotated".
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub schema: ModifierSchema,
    pub documents: BTreeMap<String, Document>,
    pub instances: Vec<AnnotatedInstance>,
    pub applicable_modifiers: BTreeSet<String>,
    /// Per-document override of the applicable set (set by merging corpora
    /// with different annotation coverage). Absent → `applicable_modifiers`.
    pub document_applicable: BTreeMap<String, BTreeSet<String>>,
}

impl Corpus {
    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.get(id)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Modifiers annotated for the instance's source corpus.
    pub fn applicable_for(&self, inst: &AnnotatedInstance) -> &BTreeSet<String> {
        self.document_applicable
            .get(&inst.mention.doc_id)
            .unwrap_or(&self.applicable_modifiers)
    }

    /// Resolved gold label of `modifier` for `inst`: the explicit label, the
    /// schema default when applicable, `None` when masked.
    pub fn resolved_label<'a>(&'a self, inst: &'a AnnotatedInstance, modifier: &str) -> Option<&'a str> {
        if let Some(l) = inst.labels.get(modifier) {
            return Some(l.as_str());
        }
        if self.applicable_for(inst).contains(modifier) {
            self.schema.get(modifier).map(|m| m.default_label.as_str())
        } else {
            None
        }
    }

    /// Checks every invariant, collecting all violations.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if let Err(e) = self.schema.validate() {
            return Err(e);
        }
        for m in &self.applicable_modifiers {
            if self.schema.get(m).is_none() {
                errors.push(CorpusError::UnknownModifier(m.clone()));
            }
        }
        for (id, doc) in &self.documents {
            if id != &doc.id {
                errors.push(CorpusError::Invalid(format!("document key {id} != id {}", doc.id)));
            }
            if doc.text.is_empty() {
                errors.push(CorpusError::Invalid(format!("document {id} is empty")));
            }
        }
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                errors.push(CorpusError::Invalid(format!("duplicate instance id {}", inst.id)));
            }
            let Some(doc) = self.documents.get(&inst.mention.doc_id) else {
                errors.push(CorpusError::Invalid(format!(
                    "instance {} references missing document {}",
                    inst.id, inst.mention.doc_id
                )));
                continue;
            };
            if let Err(e) = check_spans(doc, &inst.mention.spans) {
                errors.push(e);
                continue;
            }
            if inst.mention.surface.len() != inst.mention.spans.len() {
                errors.push(CorpusError::Invalid(format!(
                    "instance {}: {} surfaces for {} spans",
                    inst.id,
                    inst.mention.surface.len(),
                    inst.mention.spans.len()
                )));
                continue;
            }
            for (s, surf) in inst.mention.spans.iter().zip(&inst.mention.surface) {
                let actual = doc.slice(s.start, s.end);
                if actual != surf {
                    errors.push(CorpusError::SurfaceMismatch {
                        doc_id: doc.id.clone(),
                        annotated: surf.clone(),
                        actual: actual.to_string(),
                    });
                }
            }
            for (m, l) in &inst.labels {
                match self.schema.get(m) {
                    None => errors.push(CorpusError::UnknownModifier(m.clone())),
                    Some(def) if def.label_index(l).is_none() => {
                        errors.push(CorpusError::UnknownLabel {
                            modifier: m.clone(),
                            label: l.clone(),
                        })
                    }
                    _ => {}
                }
            }
        }
        match CorpusError::collect(errors) {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Same schema and applicability, with only the given instances and the
    /// documents they reference.
    pub fn with_instances(&self, name: &str, instances: Vec<AnnotatedInstance>) -> Corpus {
        let doc_ids: BTreeSet<&str> = instances.iter().map(|i| i.mention.doc_id.as_str()).collect();
        let documents = self
            .documents
            .iter()
            .filter(|(id, _)| doc_ids.contains(id.as_str()))
            .map(|(id, d)| (id.clone(), d.clone()))
            .collect();
        let document_applicable = self
            .document_applicable
            .iter()
            .filter(|(id, _)| doc_ids.contains(id.as_str()))
            .map(|(id, s)| (id.clone(), s.clone()))
            .collect();
        Corpus {
            name: name.to_string(),
            schema: self.schema.clone(),
            documents,
            instances,
            applicable_modifiers: self.applicable_modifiers.clone(),
            document_applicable,
        }
    }

    /// Per-modifier counts of resolved labels, in schema order. Masked
    /// instances are counted under `None`.
    pub fn label_counts(&self) -> Vec<(String, Vec<(String, usize)>, usize)> {
        self.schema
            .modifiers
            .iter()
            .map(|m| {
                let mut counts = vec![0usize; m.labels.len()];
                let mut masked = 0;
                for inst in &self.instances {
                    match self.resolved_label(inst, &m.name).and_then(|l| m.label_index(l)) {
                        Some(i) => counts[i] += 1,
                        None => masked += 1,
                    }
                }
                (
                    m.name.clone(),
                    m.labels.iter().cloned().zip(counts).collect(),
                    masked,
                )
            })
            .collect()
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_rejects_default_outside_labels() {
        let err = ModifierSchema::new(vec![ModifierDef::new("neg", &["yes", "no"], "maybe")]);
        assert!(matches!(err, Err(CorpusError::InvalidSchema(_))));
    }

    #[test]
    fn schema_rejects_single_label_and_duplicates() {
        assert!(ModifierSchema::new(vec![ModifierDef::new("neg", &["no"], "no")]).is_err());
        assert!(ModifierSchema::new(vec![ModifierDef::new("neg", &["no", "no"], "no")]).is_err());
        assert!(ModifierSchema::new(vec![
            ModifierDef::new("neg", &["no", "yes"], "no"),
            ModifierDef::new("neg", &["no", "yes"], "no"),
        ])
        .is_err());
    }

    #[test]
    fn document_slices_by_character() {
        let doc = Document::new("d", "ñandú fever");
        assert_eq!(doc.char_len(), 11);
        assert_eq!(doc.slice(6, 11), "fever");
        assert_eq!(doc.slice(0, 5), "ñandú");
        assert!(doc.try_slice(6, 12).is_none());
    }

    #[test]
    fn resolved_label_masks_inapplicable_modifiers() {
        let mut c = test_util::small_corpus(2);
        let inst = c.instances[1].clone();
        assert_eq!(c.resolved_label(&inst, "Severity"), Some("unmarked"));
        c.applicable_modifiers.remove("Severity");
        assert_eq!(c.resolved_label(&inst, "Severity"), None);
        assert_eq!(c.resolved_label(&inst, "Negation"), Some("no"));
    }

    #[test]
    fn validate_reports_every_problem() {
        let mut c = test_util::small_corpus(3);
        c.instances[0].labels.insert("Bogus".into(), "x".into());
        c.instances[1].labels.insert("Negation".into(), "maybe".into());
        match c.validate() {
            Err(CorpusError::Multiple(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_counts_sum_to_instance_count() {
        let c = test_util::small_corpus(10);
        for (_, counts, masked) in c.label_counts() {
            assert_eq!(counts.iter().map(|(_, n)| n).sum::<usize>() + masked, 10);
        }
    }
}
