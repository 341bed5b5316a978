//! Corpus statistics: entity counts and non-default annotations per
//! modifier, plus full per-label breakdowns.

use crate::corpus::Corpus;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifierStats {
    pub modifier: String,
    pub applicable: bool,
    /// Instances whose resolved label is not the default.
    pub non_default: usize,
    pub counts: Vec<(String, usize)>,
    /// Instances the modifier does not apply to.
    pub not_applicable: usize,
}

impl ModifierStats {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, c)| c).sum::<usize>() + self.not_applicable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub corpus: String,
    pub entities: usize,
    pub documents: usize,
    pub modifiers: Vec<ModifierStats>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let modifiers = corpus
        .label_counts()
        .into_iter()
        .map(|(name, counts, masked)| {
            let def = corpus.schema.get(&name).expect("counted modifier is in schema");
            let non_default = counts
                .iter()
                .filter(|(l, _)| *l != def.default_label)
                .map(|(_, c)| c)
                .sum();
            ModifierStats {
                applicable: corpus.applicable_modifiers.contains(&name)
                    || corpus.document_applicable.values().any(|s| s.contains(&name)),
                modifier: name,
                non_default,
                counts,
                not_applicable: masked,
            }
        })
        .collect();
    CorpusStats {
        corpus: corpus.name.clone(),
        entities: corpus.len(),
        documents: corpus.documents.len(),
        modifiers,
    }
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// One row per corpus: entities, then non-default counts per modifier
/// (`-` where a corpus does not annotate the modifier).
pub fn summary_table(stats: &[CorpusStats]) -> String {
    let mut columns: Vec<String> = Vec::new();
    for s in stats {
        for m in &s.modifiers {
            if !columns.contains(&m.modifier) {
                columns.push(m.modifier.clone());
            }
        }
    }
    let mut rows = vec![std::iter::once("Corpus".to_string())
        .chain(std::iter::once("Ents".to_string()))
        .chain(columns.iter().cloned())
        .collect::<Vec<_>>()];
    for s in stats {
        let mut row = vec![s.corpus.clone(), s.entities.to_string()];
        for c in &columns {
            row.push(match s.modifiers.iter().find(|m| &m.modifier == c) {
                Some(m) if m.applicable => m.non_default.to_string(),
                _ => "-".into(),
            });
        }
        rows.push(row);
    }
    render(&rows)
}

/// Per modifier, the count of every label plus instances it does not apply
/// to; each row sums to the entity count.
pub fn detail_table(stats: &CorpusStats) -> String {
    let mut out = format!("{}: {} entities in {} documents\n", stats.corpus, stats.entities, stats.documents);
    let mut rows = vec![vec!["Modifier".to_string(), "Label".into(), "Count".into()]];
    for m in &stats.modifiers {
        for (l, c) in &m.counts {
            rows.push(vec![m.modifier.clone(), l.clone(), c.to_string()]);
        }
        rows.push(vec![m.modifier.clone(), "(n/a)".into(), m.not_applicable.to_string()]);
        rows.push(vec![m.modifier.clone(), "(total)".into(), m.total().to_string()]);
    }
    out.push_str(&render(&rows));
    out
}
