//! Metrics over gold/predicted label pairs: weighted and plain accuracy,
//! micro/macro F1 with the default label as the null class, confusion
//! matrices and the 2×2 chi-square comparison.

mod report;

pub use report::{build_report, compare_reports, Comparison, ComparisonRow, EvalOptions, EvalReport, ModifierReport, PrevalenceRow, ReportRow};

use crate::corpus::ModifierSchema;
use crate::util::write_atomic;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// df = 1, alpha = 0.05.
pub const CHI_SQUARE_CRITICAL_05: f64 = 3.841;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluated instances for {0}")]
    EmptySet(String),
    #[error("{0}: every gold label has prevalence 1, so all weights are zero")]
    EmptyWeight(String),
    #[error("{0}: every class is excluded from F1")]
    AllClassesExcluded(String),
    #[error("contingency table has a zero margin")]
    DegenerateTable,
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("unknown modifier {0:?}")]
    UnknownModifier(String),
    #[error("unknown label {label:?} for {modifier}")]
    UnknownLabel { modifier: String, label: String },
    #[error("gold and predictions disagree on instances: {0}")]
    MismatchedInstances(String),
    #[error("duplicate prediction for {instance_id} / {modifier}")]
    DuplicateRecord { instance_id: String, modifier: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub modifier: String,
    pub gold: String,
    pub pred: String,
}

/// Gold and predicted labels for a set of (instance, modifier) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub schema: ModifierSchema,
    records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn new(schema: ModifierSchema, records: Vec<PredictionRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            let def = schema
                .get(&r.modifier)
                .ok_or_else(|| EvalError::UnknownModifier(r.modifier.clone()))?;
            for l in [&r.gold, &r.pred] {
                if def.label_index(l).is_none() {
                    return Err(EvalError::UnknownLabel {
                        modifier: r.modifier.clone(),
                        label: l.clone(),
                    });
                }
            }
            if !seen.insert((r.instance_id.as_str(), r.modifier.as_str())) {
                return Err(EvalError::DuplicateRecord {
                    instance_id: r.instance_id.clone(),
                    modifier: r.modifier.clone(),
                });
            }
        }
        Ok(Self { schema, records })
    }

    /// Joins per-instance gold and predicted label maps. Both sides must
    /// cover the same instances and, per instance, the same modifiers.
    pub fn from_maps(
        schema: ModifierSchema,
        gold: &BTreeMap<String, BTreeMap<String, String>>,
        pred: &BTreeMap<String, BTreeMap<String, String>>,
    ) -> Result<Self> {
        if gold.len() != pred.len() || gold.keys().zip(pred.keys()).any(|(a, b)| a != b) {
            let missing: Vec<&String> = gold.keys().filter(|k| !pred.contains_key(*k)).take(3).collect();
            let extra: Vec<&String> = pred.keys().filter(|k| !gold.contains_key(*k)).take(3).collect();
            return Err(EvalError::MismatchedInstances(format!(
                "missing predictions for {missing:?}, unexpected {extra:?}"
            )));
        }
        let mut records = Vec::new();
        for (id, g) in gold {
            let p = &pred[id];
            if g.len() != p.len() || g.keys().zip(p.keys()).any(|(a, b)| a != b) {
                return Err(EvalError::MismatchedInstances(format!("{id}: modifier sets differ")));
            }
            for (m, gl) in g {
                records.push(PredictionRecord {
                    instance_id: id.clone(),
                    modifier: m.clone(),
                    gold: gl.clone(),
                    pred: p[m].clone(),
                });
            }
        }
        Self::new(schema, records)
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    /// Schema modifiers with at least one record, in schema order.
    pub fn modifiers(&self) -> Vec<String> {
        let present: BTreeSet<&str> = self.records.iter().map(|r| r.modifier.as_str()).collect();
        self.schema
            .names()
            .filter(|n| present.contains(n))
            .map(str::to_string)
            .collect()
    }

    pub fn pairs(&self, modifier: &str) -> Result<LabelPairs> {
        let def = self
            .schema
            .get(modifier)
            .ok_or_else(|| EvalError::UnknownModifier(modifier.to_string()))?;
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for r in self.records.iter().filter(|r| r.modifier == modifier) {
            gold.push(def.label_index(&r.gold).expect("validated"));
            pred.push(def.label_index(&r.pred).expect("validated"));
        }
        Ok(LabelPairs {
            modifier: modifier.to_string(),
            labels: def.labels.clone(),
            default_index: def.default_index(),
            gold,
            pred,
        })
    }
}

/// Index-encoded gold/pred for one modifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPairs {
    pub modifier: String,
    pub labels: Vec<String>,
    pub default_index: usize,
    pub gold: Vec<usize>,
    pub pred: Vec<usize>,
}

impl LabelPairs {
    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    pub fn correct(&self) -> usize {
        self.gold.iter().zip(&self.pred).filter(|(g, p)| g == p).count()
    }

    pub fn gold_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.labels.len()];
        for &g in &self.gold {
            c[g] += 1;
        }
        c
    }

    /// Rows are gold labels, columns predictions.
    pub fn confusion(&self) -> Vec<Vec<usize>> {
        let k = self.labels.len();
        let mut m = vec![vec![0; k]; k];
        for (&g, &p) in self.gold.iter().zip(&self.pred) {
            m[g][p] += 1;
        }
        m
    }

    fn nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(EvalError::EmptySet(self.modifier.clone()))
        } else {
            Ok(())
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.correct() as f64 / self.len() as f64)
    }

    /// Per-class weight `1 - prevalence` with prevalence taken over this set.
    pub fn class_weights(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.gold_counts().iter().map(|&c| 1.0 - c as f64 / n).collect()
    }

    /// Numerator and denominator of the weighted accuracy, both scaled by
    /// the set size so they are exact integers.
    pub fn weighted_counts(&self) -> Result<(u64, u64)> {
        self.nonempty()?;
        let n = self.len() as u64;
        let counts = self.gold_counts();
        let mut num = 0;
        let mut den = 0;
        for (&g, &p) in self.gold.iter().zip(&self.pred) {
            let w = n - counts[g] as u64;
            den += w;
            if g == p {
                num += w;
            }
        }
        Ok((num, den))
    }

    pub fn weighted_accuracy(&self) -> Result<f64> {
        let (num, den) = self.weighted_counts()?;
        if den == 0 {
            return Err(EvalError::EmptyWeight(self.modifier.clone()));
        }
        Ok(num as f64 / den as f64)
    }

    /// TP, FP, FN for one class.
    pub fn class_counts(&self, class: usize) -> (usize, usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (&g, &p) in self.gold.iter().zip(&self.pred) {
            match (g == class, p == class) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        (tp, fp, fn_)
    }

    pub fn f1_scores(&self, opts: &F1Options) -> Result<F1Scores> {
        f1_scores(self, opts)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Options {
    /// Labels left out of both averages.
    pub exclude: BTreeSet<String>,
    pub include_default_in_macro: bool,
    /// Pool the default label into micro F1 like any other class.
    pub include_default_in_micro: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
    /// No gold and no predicted instances; F1 is reported as 0.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
    pub per_class: Vec<ClassScores>,
    /// Totals pooled for micro F1.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

pub fn f1_scores(pairs: &LabelPairs, opts: &F1Options) -> Result<F1Scores> {
    let included = |c: usize, with_default: bool| {
        !opts.exclude.contains(&pairs.labels[c]) && (with_default || c != pairs.default_index)
    };
    let k = pairs.labels.len();
    let macro_classes: Vec<usize> = (0..k).filter(|&c| included(c, opts.include_default_in_macro)).collect();
    let micro_classes: Vec<usize> = (0..k).filter(|&c| included(c, opts.include_default_in_micro)).collect();
    if macro_classes.is_empty() || micro_classes.is_empty() {
        return Err(EvalError::AllClassesExcluded(pairs.modifier.clone()));
    }
    let counts: Vec<(usize, usize, usize)> = (0..k).map(|c| pairs.class_counts(c)).collect();
    let per_class: Vec<ClassScores> = counts
        .iter()
        .enumerate()
        .map(|(c, &(tp, fp, fn_))| ClassScores {
            label: pairs.labels[c].clone(),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: f1_from(tp, fp, fn_),
            support: tp + fn_,
            predicted: tp + fp,
            empty: tp + fp + fn_ == 0,
        })
        .collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for &c in &micro_classes {
        tp += counts[c].0;
        fp += counts[c].1;
        fn_ += counts[c].2;
    }
    let macro_ = macro_classes.iter().map(|&c| per_class[c].f1).sum::<f64>() / macro_classes.len() as f64;
    Ok(F1Scores {
        micro: f1_from(tp, fp, fn_),
        macro_,
        per_class,
        tp,
        fp,
        fn_,
    })
}

pub fn weighted_accuracy(preds: &PredictionSet, modifier: &str) -> Result<f64> {
    preds.pairs(modifier)?.weighted_accuracy()
}

pub fn unweighted_accuracy(preds: &PredictionSet, modifier: &str) -> Result<f64> {
    preds.pairs(modifier)?.accuracy()
}

pub fn confusion_matrix(preds: &PredictionSet, modifier: &str) -> Result<Vec<Vec<usize>>> {
    Ok(preds.pairs(modifier)?.confusion())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub significant: bool,
}

/// Pearson chi-square on `[[a_c, a_t - a_c], [b_c, b_t - b_c]]`, optionally
/// with the Yates continuity correction.
pub fn chi_square(a_correct: u64, a_total: u64, b_correct: u64, b_total: u64, yates: bool) -> Result<ChiSquare> {
    if a_total == 0 || b_total == 0 || a_correct > a_total || b_correct > b_total {
        return Err(EvalError::InvalidCounts(format!(
            "{a_correct}/{a_total} vs {b_correct}/{b_total}"
        )));
    }
    let (a, b) = (a_correct as f64, (a_total - a_correct) as f64);
    let (c, d) = (b_correct as f64, (b_total - b_correct) as f64);
    let margins = [a + b, c + d, a + c, b + d];
    if margins.iter().any(|&m| m == 0.0) {
        return Err(EvalError::DegenerateTable);
    }
    let n = a + b + c + d;
    let mut diff = (a * d - b * c).abs();
    if yates {
        diff = (diff - n / 2.0).max(0.0);
    }
    let statistic = n * diff * diff / margins.iter().product::<f64>();
    Ok(ChiSquare {
        statistic,
        significant: statistic > CHI_SQUARE_CRITICAL_05,
    })
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| EvalError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}
