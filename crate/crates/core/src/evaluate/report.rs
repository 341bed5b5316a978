//! Per-modifier reports with an average row, and report-to-report
//! chi-square comparison.

use super::{chi_square, ClassScores, EvalError, F1Options, LabelPairs, PredictionSet, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Labels excluded from F1, per modifier.
    pub exclude: BTreeMap<String, BTreeSet<String>>,
    pub include_default_in_macro: bool,
    pub include_default_in_micro: bool,
    /// Average row pools instances across modifiers instead of averaging
    /// the per-modifier scores.
    pub pooled_average: bool,
}

impl EvalOptions {
    fn f1_for(&self, modifier: &str) -> F1Options {
        F1Options {
            exclude: self.exclude.get(modifier).cloned().unwrap_or_default(),
            include_default_in_macro: self.include_default_in_macro,
            include_default_in_micro: self.include_default_in_micro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceRow {
    pub label: String,
    pub count: usize,
    pub prevalence: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifierReport {
    pub modifier: String,
    pub labels: Vec<String>,
    pub n: usize,
    pub correct: usize,
    /// `None` when a single gold class makes every weight zero.
    pub weighted_accuracy: Option<f64>,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// Rows gold, columns predicted, in label order.
    pub confusion: Vec<Vec<usize>>,
    pub prevalence: Vec<PrevalenceRow>,
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub n: usize,
    pub correct: usize,
    pub weighted_accuracy: Option<f64>,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Where class prevalences for the weights come from.
    pub prevalence_source: String,
    /// "modifier_mean" or "pooled".
    pub average: String,
    pub options: EvalOptions,
    pub modifiers: Vec<ModifierReport>,
    pub avg: ReportRow,
}

fn r6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn modifier_report(pairs: &LabelPairs, opts: &EvalOptions) -> Result<ModifierReport> {
    let accuracy = pairs.accuracy()?;
    let weighted_accuracy = match pairs.weighted_accuracy() {
        Ok(w) => Some(r6(w)),
        Err(EvalError::EmptyWeight(m)) => {
            log::warn!("{m}: weighted accuracy undefined (single gold class)");
            None
        }
        Err(e) => return Err(e),
    };
    let f1 = pairs.f1_scores(&opts.f1_for(&pairs.modifier))?;
    let n = pairs.len();
    let weights = pairs.class_weights();
    let prevalence = pairs
        .gold_counts()
        .iter()
        .zip(&pairs.labels)
        .zip(&weights)
        .map(|((&count, label), &w)| PrevalenceRow {
            label: label.clone(),
            count,
            prevalence: r6(count as f64 / n as f64),
            weight: r6(w),
        })
        .collect();
    Ok(ModifierReport {
        modifier: pairs.modifier.clone(),
        labels: pairs.labels.clone(),
        n,
        correct: pairs.correct(),
        weighted_accuracy,
        accuracy: r6(accuracy),
        micro_f1: r6(f1.micro),
        macro_f1: r6(f1.macro_),
        per_class: f1
            .per_class
            .into_iter()
            .map(|c| ClassScores {
                precision: r6(c.precision),
                recall: r6(c.recall),
                f1: r6(c.f1),
                ..c
            })
            .collect(),
        confusion: pairs.confusion(),
        prevalence,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn pooled_row(all: &[LabelPairs], opts: &EvalOptions) -> Result<ReportRow> {
    let (mut n, mut correct) = (0, 0);
    let (mut wn, mut wd) = (0.0, 0.0);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut class_f1 = Vec::new();
    for p in all {
        n += p.len();
        correct += p.correct();
        let (a, b) = p.weighted_counts()?;
        wn += a as f64 / p.len() as f64;
        wd += b as f64 / p.len() as f64;
        let o = opts.f1_for(&p.modifier);
        let f = p.f1_scores(&o)?;
        tp += f.tp;
        fp += f.fp;
        fn_ += f.fn_;
        for (c, s) in f.per_class.iter().enumerate() {
            if !o.exclude.contains(&s.label) && (o.include_default_in_macro || c != p.default_index) {
                class_f1.push(s.f1);
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(ReportRow {
        name: "Avg".into(),
        n,
        correct,
        weighted_accuracy: (wd > 0.0).then(|| r6(wn / wd)),
        accuracy: r6(correct as f64 / n.max(1) as f64),
        micro_f1: r6(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 }),
        macro_f1: r6(mean(class_f1.into_iter())),
    })
}

/// Metrics for every modifier present in `preds` (schema order) plus the
/// average row.
pub fn build_report(preds: &PredictionSet, opts: &EvalOptions) -> Result<EvalReport> {
    let all: Vec<LabelPairs> = preds
        .modifiers()
        .iter()
        .map(|m| preds.pairs(m))
        .collect::<Result<_>>()?;
    if all.is_empty() {
        return Err(EvalError::EmptySet("all modifiers".into()));
    }
    let modifiers: Vec<ModifierReport> = all.iter().map(|p| modifier_report(p, opts)).collect::<Result<_>>()?;
    let avg = if opts.pooled_average {
        pooled_row(&all, opts)?
    } else {
        let wa: Vec<f64> = modifiers.iter().filter_map(|m| m.weighted_accuracy).collect();
        ReportRow {
            name: "Avg".into(),
            n: modifiers.iter().map(|m| m.n).sum(),
            correct: modifiers.iter().map(|m| m.correct).sum(),
            weighted_accuracy: (!wa.is_empty()).then(|| r6(mean(wa.into_iter()))),
            accuracy: r6(mean(modifiers.iter().map(|m| m.accuracy))),
            micro_f1: r6(mean(modifiers.iter().map(|m| m.micro_f1))),
            macro_f1: r6(mean(modifiers.iter().map(|m| m.macro_f1))),
        }
    };
    Ok(EvalReport {
        prevalence_source: "evaluation set".into(),
        average: if opts.pooled_average { "pooled" } else { "modifier_mean" }.into(),
        options: opts.clone(),
        modifiers,
        avg,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    /// Per-modifier rows followed by the average row.
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows: Vec<ReportRow> = self
            .modifiers
            .iter()
            .map(|m| ReportRow {
                name: m.modifier.clone(),
                n: m.n,
                correct: m.correct,
                weighted_accuracy: m.weighted_accuracy,
                accuracy: m.accuracy,
                micro_f1: m.micro_f1,
                macro_f1: m.macro_f1,
            })
            .collect();
        rows.push(self.avg.clone());
        rows
    }

    pub fn modifier(&self, name: &str) -> Option<&ModifierReport> {
        self.modifiers.iter().find(|m| m.modifier == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Metric-by-modifier table, then class prevalences.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let cols: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        let width = cols.iter().map(|c| c.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "prevalence: {}; average: {}",
            self.prevalence_source, self.average
        );
        let _ = write!(out, "{:<20}", "metric");
        for c in &cols {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        let metric_rows: [(&str, Box<dyn Fn(&ReportRow) -> String>); 5] = [
            ("weighted accuracy", Box::new(|r| fmt_opt(r.weighted_accuracy))),
            ("unweighted accuracy", Box::new(|r| format!("{:.4}", r.accuracy))),
            ("micro F1", Box::new(|r| format!("{:.4}", r.micro_f1))),
            ("macro F1", Box::new(|r| format!("{:.4}", r.macro_f1))),
            ("n", Box::new(|r| r.n.to_string())),
        ];
        for (name, f) in metric_rows.iter() {
            let _ = write!(out, "{name:<20}");
            for r in &rows {
                let _ = write!(out, " {:>width$}", f(r));
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = writeln!(out, "{:<20} {:<16} {:>8} {:>10} {:>8}", "modifier", "label", "count", "prevalence", "weight");
        for m in &self.modifiers {
            for p in &m.prevalence {
                let _ = writeln!(
                    out,
                    "{:<20} {:<16} {:>8} {:>10.4} {:>8.4}",
                    m.modifier, p.label, p.count, p.prevalence, p.weight
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub modifier: String,
    pub a_correct: usize,
    pub a_total: usize,
    pub b_correct: usize,
    pub b_total: usize,
    /// `None` for a degenerate table.
    pub statistic: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub yates: bool,
    pub rows: Vec<ComparisonRow>,
}

/// Chi-square on correct/total counts for every modifier the two reports
/// share, in the order of `a`.
pub fn compare_reports(a: &EvalReport, b: &EvalReport, yates: bool) -> Result<Comparison> {
    let mut rows = Vec::new();
    for ma in &a.modifiers {
        let Some(mb) = b.modifier(&ma.modifier) else { continue };
        let (statistic, significant) =
            match chi_square(ma.correct as u64, ma.n as u64, mb.correct as u64, mb.n as u64, yates) {
                Ok(c) => (Some(r6(c.statistic)), c.significant),
                Err(EvalError::DegenerateTable) => (None, false),
                Err(e) => return Err(e),
            };
        rows.push(ComparisonRow {
            modifier: ma.modifier.clone(),
            a_correct: ma.correct,
            a_total: ma.n,
            b_correct: mb.correct,
            b_total: mb.n,
            statistic,
            significant,
        });
    }
    Ok(Comparison { yates, rows })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("comparison serializes");
        s.push('\n');
        s
    }

    /// Significant rows carry a `*`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>12} {:>12} {:>10}", "modifier", "a", "b", "chi2");
        for r in &self.rows {
            let stat = r.statistic.map_or_else(|| "-".to_string(), |s| format!("{s:.4}"));
            let _ = writeln!(
                out,
                "{:<20} {:>12} {:>12} {:>10}{}",
                r.modifier,
                format!("{}/{}", r.a_correct, r.a_total),
                format!("{}/{}", r.b_correct, r.b_total),
                stat,
                if r.significant { " *" } else { "" }
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ModifierDef, ModifierSchema};
    use crate::evaluate::PredictionRecord;

    fn schema() -> ModifierSchema {
        ModifierSchema::new(vec![
            ModifierDef::new("neg", &["no", "yes"], "no"),
            ModifierDef::new("sev", &["u", "a", "b"], "u"),
        ])
        .unwrap()
    }

    fn rec(id: usize, m: &str, g: &str, p: &str) -> PredictionRecord {
        PredictionRecord {
            instance_id: format!("i{id}"),
            modifier: m.into(),
            gold: g.into(),
            pred: p.into(),
        }
    }

    fn set() -> PredictionSet {
        let mut recs = Vec::new();
        for i in 0..10 {
            recs.push(rec(i, "neg", if i == 9 { "yes" } else { "no" }, "no"));
            let g = ["u", "a", "b"][i % 3];
            recs.push(rec(i, "sev", g, if i < 8 { g } else { "u" }));
        }
        PredictionSet::new(schema(), recs).unwrap()
    }

    #[test]
    fn report_layout_and_average() {
        let r = build_report(&set(), &EvalOptions::default()).unwrap();
        assert_eq!(r.rows().len(), 3);
        assert_eq!(r.rows()[2].name, "Avg");
        let neg = r.modifier("neg").unwrap();
        assert_eq!(neg.weighted_accuracy, Some(0.5));
        assert_eq!(neg.confusion, vec![vec![9, 0], vec![1, 0]]);
        let sev = r.modifier("sev").unwrap();
        let expect = (neg.weighted_accuracy.unwrap() + sev.weighted_accuracy.unwrap()) / 2.0;
        assert!((r.avg.weighted_accuracy.unwrap() - expect).abs() < 2e-6);
        assert!((r.avg.accuracy - 0.9).abs() < 1e-12);
        for m in &r.modifiers {
            let total: usize = m.prevalence.iter().map(|p| p.count).sum();
            assert_eq!(total, m.n);
        }
    }

    #[test]
    fn pooled_average_differs_from_mean() {
        let opts = EvalOptions {
            pooled_average: true,
            ..Default::default()
        };
        let r = build_report(&set(), &opts).unwrap();
        assert_eq!(r.average, "pooled");
        assert!((r.avg.accuracy - 18.0 / 20.0).abs() < 1e-12);
        assert!(r.avg.micro_f1 < r.modifier("sev").unwrap().micro_f1);
    }

    #[test]
    fn json_round_trip() {
        let r = build_report(&set(), &EvalOptions::default()).unwrap();
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), r.to_json());
    }

    #[test]
    fn single_gold_class_has_no_weighted_accuracy() {
        let recs = (0..4).map(|i| rec(i, "neg", "no", "no")).collect();
        let r = build_report(&PredictionSet::new(schema(), recs).unwrap(), &EvalOptions::default()).unwrap();
        assert_eq!(r.modifiers[0].weighted_accuracy, None);
        assert_eq!(r.avg.weighted_accuracy, None);
        assert!(r.to_text().contains(" -"));
    }

    #[test]
    fn text_table_has_metric_rows_and_prevalence() {
        let t = build_report(&set(), &EvalOptions::default()).unwrap().to_text();
        for needle in ["weighted accuracy", "micro F1", "macro F1", "Avg", "prevalence", "evaluation set"] {
            assert!(t.contains(needle), "{needle} missing");
        }
    }

    #[test]
    fn compare_identical_and_significant() {
        let r = build_report(&set(), &EvalOptions::default()).unwrap();
        let c = compare_reports(&r, &r, false).unwrap();
        assert!(c.rows.iter().all(|row| row.statistic == Some(0.0) && !row.significant));

        let mk = |correct: usize| {
            let recs = (0..100)
                .map(|i| rec(i, "neg", if i % 2 == 0 { "yes" } else { "no" }, {
                    let g = if i % 2 == 0 { "yes" } else { "no" };
                    let wrong = if g == "yes" { "no" } else { "yes" };
                    if i < correct { g } else { wrong }
                }))
                .collect();
            build_report(&PredictionSet::new(schema(), recs).unwrap(), &EvalOptions::default()).unwrap()
        };
        let c = compare_reports(&mk(80), &mk(60), false).unwrap();
        assert!((c.rows[0].statistic.unwrap() - 9.5238).abs() < 1e-3);
        assert!(c.rows[0].significant);
        assert!(c.to_text().lines().nth(1).unwrap().ends_with(" *"));
    }
}
