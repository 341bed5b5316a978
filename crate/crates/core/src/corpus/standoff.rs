//! Standoff (`.txt` + `.ann`) reader and writer.
//!
//! ```text
//! T1<TAB>Disorder 10 15;30 35<TAB>left ;swell
//! A1<TAB>Negation T1 yes
//! ```
//!
//! The directory also holds a `schema.json` sidecar declaring modifiers,
//! their labels and defaults, and the modifiers this corpus annotates.

use super::{
    AnnotatedInstance, Corpus, CorpusError, Document, EntityMention, ModifierDef, ModifierSchema,
    Result, Span,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Debug, Serialize, Deserialize)]
struct SchemaFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    modifiers: Vec<ModifierDef>,
    applicable: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    document_applicable: BTreeMap<String, Vec<String>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads `schema.json` and returns the schema, the applicable set, the
/// optional corpus name and per-document applicability overrides.
pub(crate) fn read_schema_file(
    path: &Path,
) -> Result<(ModifierSchema, BTreeSet<String>, Option<String>, BTreeMap<String, BTreeSet<String>>)> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    let file: SchemaFile = serde_json::from_str(&raw).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let schema = ModifierSchema::new(file.modifiers)?;
    let applicable: BTreeSet<String> = file.applicable.into_iter().collect();
    for m in &applicable {
        if schema.get(m).is_none() {
            return Err(CorpusError::UnknownModifier(m.clone()));
        }
    }
    let doc_app = file
        .document_applicable
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect();
    Ok((schema, applicable, file.name, doc_app))
}

pub(crate) fn write_schema_file(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = SchemaFile {
        name: Some(corpus.name.clone()),
        modifiers: corpus.schema.modifiers.clone(),
        applicable: corpus.applicable_modifiers.iter().cloned().collect(),
        document_applicable: corpus
            .document_applicable
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).expect("schema serializes");
    fs::write(path, json + "\n").map_err(io_err(path))
}

/// Parses a standoff directory into a validated corpus.
pub fn parse_standoff(dir: &Path) -> Result<Corpus> {
    let (schema, applicable, name, document_applicable) = read_schema_file(&dir.join(SCHEMA_FILE))?;
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();

    let parsed: Vec<std::result::Result<(Document, Vec<AnnotatedInstance>), Vec<CorpusError>>> = stems
        .par_iter()
        .map(|stem| parse_pair(dir, stem, &schema))
        .collect();

    let mut documents = BTreeMap::new();
    let mut instances = Vec::new();
    let mut errors = Vec::new();
    for p in parsed {
        match p {
            Ok((doc, insts)) => {
                instances.extend(insts);
                documents.insert(doc.id.clone(), doc);
            }
            Err(errs) => errors.extend(errs),
        }
    }
    if let Some(e) = CorpusError::collect(errors) {
        return Err(e);
    }
    let corpus = Corpus {
        name: name.unwrap_or_else(|| {
            dir.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".into())
        }),
        schema,
        documents,
        instances,
        applicable_modifiers: applicable,
        document_applicable,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn normalize_surface(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn parse_pair(
    dir: &Path,
    stem: &str,
    schema: &ModifierSchema,
) -> std::result::Result<(Document, Vec<AnnotatedInstance>), Vec<CorpusError>> {
    let txt_path = dir.join(format!("{stem}.txt"));
    let ann_path = dir.join(format!("{stem}.ann"));
    let text = fs::read_to_string(&txt_path).map_err(|e| vec![io_err(&txt_path)(e)])?;
    let doc = Document::new(stem, text);
    let ann = match fs::read_to_string(&ann_path) {
        Ok(s) => s,
        Err(e) => return Err(vec![io_err(&ann_path)(e)]),
    };

    let mut errors = Vec::new();
    // T id -> index into `instances`
    let mut by_tid: BTreeMap<String, usize> = BTreeMap::new();
    let mut instances: Vec<AnnotatedInstance> = Vec::new();
    let malformed = |lineno: usize, reason: &str| CorpusError::MalformedLine {
        file: ann_path.clone(),
        lineno,
        reason: reason.to_string(),
    };

    for (i, line) in ann.lines().enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let id = fields.next().unwrap_or_default();
        match id.chars().next() {
            Some('T') => {
                let (Some(body), Some(annotated)) = (fields.next(), fields.next()) else {
                    errors.push(malformed(lineno, "text-bound annotation needs 3 tab-separated fields"));
                    continue;
                };
                let Some((_etype, offsets)) = body.split_once(' ') else {
                    errors.push(malformed(lineno, "missing offsets"));
                    continue;
                };
                let mut spans = Vec::new();
                let mut ok = true;
                for frag in offsets.split(';') {
                    let nums: Vec<&str> = frag.split_whitespace().collect();
                    match nums.as_slice() {
                        [s, e] => match (s.parse::<usize>(), e.parse::<usize>()) {
                            (Ok(s), Ok(e)) => spans.push(Span::new(s, e)),
                            _ => ok = false,
                        },
                        _ => ok = false,
                    }
                }
                if !ok {
                    errors.push(malformed(lineno, "offsets must be `<start> <end>[;<start> <end>]*`"));
                    continue;
                }
                let mention = match EntityMention::from_spans(&doc, spans) {
                    Ok(m) => m,
                    Err(e) => {
                        errors.push(e);
                        continue;
                    }
                };
                let annotated = normalize_surface(annotated);
                let actual: Vec<String> = mention.surface.iter().map(|s| normalize_surface(s)).collect();
                if annotated != actual.join(";") && annotated != actual.join(" ") {
                    errors.push(CorpusError::SurfaceMismatch {
                        doc_id: doc.id.clone(),
                        annotated,
                        actual: actual.join(";"),
                    });
                    continue;
                }
                if by_tid.contains_key(id) {
                    errors.push(malformed(lineno, "duplicate annotation id"));
                    continue;
                }
                by_tid.insert(id.to_string(), instances.len());
                instances.push(AnnotatedInstance {
                    id: format!("{}/{}", doc.id, id),
                    mention,
                    labels: BTreeMap::new(),
                });
            }
            Some('A') | Some('M') => {
                let Some(body) = fields.next() else {
                    errors.push(malformed(lineno, "attribute needs 2 tab-separated fields"));
                    continue;
                };
                let parts: Vec<&str> = body.split_whitespace().collect();
                let [modifier, target, label] = parts.as_slice() else {
                    errors.push(malformed(lineno, "attribute must be `<Modifier> T<n> <Label>`"));
                    continue;
                };
                let Some(&idx) = by_tid.get(*target) else {
                    errors.push(malformed(lineno, "attribute references an unknown or later T id"));
                    continue;
                };
                let Some(def) = schema.get(modifier) else {
                    errors.push(CorpusError::UnknownModifier(modifier.to_string()));
                    continue;
                };
                if def.label_index(label).is_none() {
                    errors.push(CorpusError::UnknownLabel {
                        modifier: modifier.to_string(),
                        label: label.to_string(),
                    });
                    continue;
                }
                let labels = &mut instances[idx].labels;
                if let Some(prev) = labels.get(*modifier) {
                    log::warn!(
                        "{}:{lineno}: duplicate {modifier} on {target} ({label}); keeping {prev}",
                        ann_path.display()
                    );
                    continue;
                }
                labels.insert(modifier.to_string(), label.to_string());
            }
            // notes, relations, events, normalizations
            Some('#') | Some('R') | Some('E') | Some('N') | Some('*') => {}
            _ => errors.push(malformed(lineno, "unrecognized annotation id")),
        }
    }
    if errors.is_empty() {
        Ok((doc, instances))
    } else {
        Err(errors)
    }
}

/// Writes `corpus` as a standoff directory (created if missing).
pub fn write_standoff(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_schema_file(&dir.join(SCHEMA_FILE), corpus)?;

    let mut per_doc: BTreeMap<&str, Vec<&AnnotatedInstance>> = BTreeMap::new();
    for inst in &corpus.instances {
        per_doc.entry(inst.mention.doc_id.as_str()).or_default().push(inst);
    }
    for (id, doc) in &corpus.documents {
        let txt: PathBuf = dir.join(format!("{id}.txt"));
        fs::write(&txt, &doc.text).map_err(io_err(&txt))?;

        let insts = per_doc.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let tids = assign_tids(id, insts);
        let mut ann = String::new();
        let mut attr_n = 0;
        for (inst, tid) in insts.iter().zip(&tids) {
            let offsets: Vec<String> = inst
                .mention
                .spans
                .iter()
                .map(|s| format!("{} {}", s.start, s.end))
                .collect();
            let surface: Vec<String> = inst.mention.surface.iter().map(|s| normalize_surface(s)).collect();
            ann.push_str(&format!("{tid}\tEntity {}\t{}\n", offsets.join(";"), surface.join(";")));
            for (m, l) in &inst.labels {
                attr_n += 1;
                ann.push_str(&format!("A{attr_n}\t{m} {tid} {l}\n"));
            }
        }
        let ann_path = dir.join(format!("{id}.ann"));
        fs::write(&ann_path, ann).map_err(io_err(&ann_path))?;
    }
    Ok(())
}

/// Reuses `T<n>` ids embedded in instance ids when they are unique, and
/// numbers the rest after the largest one seen.
fn assign_tids(doc_id: &str, insts: &[&AnnotatedInstance]) -> Vec<String> {
    let prefix = format!("{doc_id}/T");
    let parsed: Vec<Option<u64>> = insts
        .iter()
        .map(|i| i.id.strip_prefix(&prefix).and_then(|n| n.parse().ok()))
        .collect();
    let mut used = BTreeSet::new();
    let mut out = vec![String::new(); insts.len()];
    for (k, p) in parsed.iter().enumerate() {
        if let Some(n) = p {
            if used.insert(*n) {
                out[k] = format!("T{n}");
            }
        }
    }
    let mut next = used.iter().next_back().copied().unwrap_or(0) + 1;
    for slot in out.iter_mut().filter(|s| s.is_empty()) {
        *slot = format!("T{next}");
        next += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_util;

    fn write_dir(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let schema = r#"{"modifiers":[{"name":"Negation","labels":["no","yes"],"default":"no"}],"applicable":["Negation"]}"#;
        fs::write(dir.path().join(SCHEMA_FILE), schema).unwrap();
        for (name, body) in files {
            fs::write(dir.path().join(name), body).unwrap();
        }
        dir
    }

    #[test]
    fn parses_mention_and_attribute() {
        let dir = write_dir(&[
            ("d1.txt", "Patient: cough absent today"),
            ("d1.ann", "T1\tDisorder 9 14\tcough\nA1\tNegation T1 yes\n"),
        ]);
        let c = parse_standoff(dir.path()).unwrap();
        assert_eq!(c.instances.len(), 1);
        let inst = &c.instances[0];
        assert_eq!(inst.id, "d1/T1");
        assert_eq!(inst.mention.surface, vec!["cough"]);
        assert_eq!(inst.labels.get("Negation").map(String::as_str), Some("yes"));
    }

    #[test]
    fn parses_discontiguous_mention() {
        //         0123456789012345678901234567890123456789
        let text = "xxxxxxxxxxleft xxxxxxxxxxxxxxxxswellxxxxxxx";
        let dir = write_dir(&[("d.txt", text), ("d.ann", "T2\tDisorder 10 15;31 36\tleft ;swell\n")]);
        let c = parse_standoff(dir.path()).unwrap();
        let m = &c.instances[0].mention;
        assert_eq!(m.spans, vec![Span::new(10, 15), Span::new(31, 36)]);
        assert_eq!(m.surface, vec!["left ", "swell"]);
    }

    #[test]
    fn accepts_space_joined_discontiguous_surface() {
        let text = "left leg shows swelling";
        let dir = write_dir(&[("d.txt", text), ("d.ann", "T1\tDisorder 0 8;15 23\tleft leg swelling\n")]);
        let c = parse_standoff(dir.path()).unwrap();
        assert_eq!(c.instances[0].mention.surface, vec!["left leg", "swelling"]);
    }

    #[test]
    fn end_beyond_document_is_out_of_bounds() {
        let dir = write_dir(&[("d.txt", "short"), ("d.ann", "T1\tDisorder 2 50\tort\n")]);
        assert!(matches!(
            parse_standoff(dir.path()),
            Err(CorpusError::OffsetOutOfBounds { end: 50, len: 5, .. })
        ));
    }

    #[test]
    fn surface_mismatch_is_reported() {
        let dir = write_dir(&[("d.txt", "no fever"), ("d.ann", "T1\tDisorder 3 8\tcough\n")]);
        assert!(matches!(parse_standoff(dir.path()), Err(CorpusError::SurfaceMismatch { .. })));
    }

    #[test]
    fn malformed_line_carries_line_number() {
        let dir = write_dir(&[("d.txt", "no fever"), ("d.ann", "T1\tDisorder 3 8\tfever\nT2 garbage\n")]);
        match parse_standoff(dir.path()) {
            Err(CorpusError::MalformedLine { lineno, .. }) => assert_eq!(lineno, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_modifier_and_label_are_collected() {
        let dir = write_dir(&[
            ("d.txt", "no fever"),
            (
                "d.ann",
                "T1\tDisorder 3 8\tfever\nA1\tSeverity T1 high\nA2\tNegation T1 maybe\n",
            ),
        ]);
        match parse_standoff(dir.path()) {
            Err(CorpusError::Multiple(errs)) => {
                assert!(matches!(errs[0], CorpusError::UnknownModifier(_)));
                assert!(matches!(errs[1], CorpusError::UnknownLabel { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_attribute_keeps_first() {
        let dir = write_dir(&[
            ("d.txt", "no fever"),
            ("d.ann", "T1\tDisorder 3 8\tfever\nA1\tNegation T1 yes\nA2\tNegation T1 no\n"),
        ]);
        let c = parse_standoff(dir.path()).unwrap();
        assert_eq!(c.instances[0].labels["Negation"], "yes");
    }

    #[test]
    fn write_then_parse_round_trips() {
        let c = test_util::small_corpus(7);
        let dir = tempfile::tempdir().unwrap();
        write_standoff(&c, dir.path()).unwrap();
        let back = parse_standoff(dir.path()).unwrap();
        assert_eq!(back.documents, c.documents);
        assert_eq!(back.instances, c.instances);
        assert_eq!(back.schema, c.schema);
        assert_eq!(back.applicable_modifiers, c.applicable_modifiers);
    }
}
