//! JSON-lines alternative to `.ann` files: a directory with `schema.json`,
//! the `.txt` documents, and `instances.jsonl` holding one instance per line.

use super::standoff::{read_schema_file, write_schema_file, SCHEMA_FILE};
use super::{AnnotatedInstance, Corpus, CorpusError, Document, EntityMention, Result, Span};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const INSTANCES_FILE: &str = "instances.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct InstanceLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    doc_id: String,
    spans: Vec<(usize, usize)>,
    #[serde(default)]
    labels: BTreeMap<String, String>,
}

pub fn read_jsonl(dir: &Path) -> Result<Corpus> {
    let (schema, applicable, name, document_applicable) = read_schema_file(&dir.join(SCHEMA_FILE))?;
    let path = dir.join(INSTANCES_FILE);
    let raw = fs::read_to_string(&path).map_err(|source| CorpusError::Io {
        path: path.clone(),
        source,
    })?;
    let mut documents: BTreeMap<String, Document> = BTreeMap::new();
    let mut instances = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceLine = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(CorpusError::MalformedLine {
                    file: path.clone(),
                    lineno: i + 1,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if !documents.contains_key(&rec.doc_id) {
            let txt = dir.join(format!("{}.txt", rec.doc_id));
            match fs::read_to_string(&txt) {
                Ok(text) => {
                    documents.insert(rec.doc_id.clone(), Document::new(&rec.doc_id, text));
                }
                Err(source) => {
                    errors.push(CorpusError::Io { path: txt, source });
                    continue;
                }
            }
        }
        let doc = &documents[&rec.doc_id];
        let spans = rec.spans.iter().map(|&(s, e)| Span::new(s, e)).collect();
        match EntityMention::from_spans(doc, spans) {
            Ok(mention) => instances.push(AnnotatedInstance {
                id: rec.id.unwrap_or_else(|| format!("{}/L{}", rec.doc_id, i + 1)),
                mention,
                labels: rec.labels,
            }),
            Err(e) => errors.push(e),
        }
    }
    if let Some(e) = CorpusError::collect(errors) {
        return Err(e);
    }
    let corpus = Corpus {
        name: name.unwrap_or_else(|| "corpus".into()),
        schema,
        documents,
        instances,
        applicable_modifiers: applicable,
        document_applicable,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn write_jsonl(corpus: &Corpus, dir: &Path) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_schema_file(&dir.join(SCHEMA_FILE), corpus)?;
    for (id, doc) in &corpus.documents {
        let p = dir.join(format!("{id}.txt"));
        fs::write(&p, &doc.text).map_err(io(&p))?;
    }
    let path = dir.join(INSTANCES_FILE);
    let mut out = Vec::new();
    for inst in &corpus.instances {
        let rec = InstanceLine {
            id: Some(inst.id.clone()),
            doc_id: inst.mention.doc_id.clone(),
            spans: inst.mention.spans.iter().map(|s| (s.start, s.end)).collect(),
            labels: inst.labels.clone(),
        };
        serde_json::to_writer(&mut out, &rec).expect("instance serializes");
        out.push(b'\n');
    }
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io(&path))
}
