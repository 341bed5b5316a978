use super::config::{CorpusSource, ExperimentConfig, SynthSpec};
use super::manifest::{hash_path, ManifestWriter};
use super::stats::{corpus_stats, detail_table, summary_table, CorpusStats};
use super::CliError;
use crate::corpus::{
    generate_synthetic, merge_corpora, parse_standoff, read_jsonl, split_corpus, write_jsonl, write_standoff, Corpus,
    ModifierSchema, INSTANCES_FILE,
};
use crate::evaluate::{
    build_report, compare_reports, read_predictions, write_predictions, Comparison, EvalOptions, EvalReport,
    PredictionRecord, PredictionSet,
};
use crate::featurize::{build_vocab, encode_corpus, read_cache, write_cache, EncodedExample, FeatureConfig, TokenizerVocab};
use crate::model::{predict_all, EncoderConfig, LossMode, MultiTaskModel};
use crate::train::{refit, single_task_model, train, transfer_load, Checkpoint, TrainOutcome};
use crate::util::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn to_json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

/// Output layout under the configured output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepared")
    }
    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.prepared().join(split)
    }
    pub fn cache(&self, split: &str) -> PathBuf {
        self.prepared().join(format!("{split}.cache"))
    }
    pub fn vocab(&self) -> PathBuf {
        self.prepared().join("vocab.json")
    }
    pub fn prepare_info(&self) -> PathBuf {
        self.prepared().join("prepare.json")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }
    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
    pub fn predictions(&self, name: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{name}.jsonl"))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
    pub fn manifest(&self, command: &str, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}-{name}.json"))
    }
}

/// Reads a JSON-lines corpus directory, or a standoff one otherwise.
pub fn load_corpus_dir(path: &Path) -> Result<Corpus, CliError> {
    if path.join(INSTANCES_FILE).is_file() {
        Ok(read_jsonl(path)?)
    } else {
        Ok(parse_standoff(path)?)
    }
}

fn load_source(src: &CorpusSource) -> Result<(Corpus, String, String), CliError> {
    match src {
        CorpusSource::Path(p) => Ok((load_corpus_dir(p)?, p.display().to_string(), hash_path(p)?)),
        CorpusSource::Synth { synth } => {
            let corpus = generate_synthetic(&synth.to_config()?, synth.seed)?.corpus;
            let key = format!("synth:{}:{}:{}", synth.preset, synth.instances, synth.seed);
            Ok((corpus, key, sha256_hex(&serde_json::to_vec(synth).expect("spec serializes"))))
        }
    }
}

/// Loads every configured corpus and merges them in order.
pub fn load_corpora(cfg: &ExperimentConfig) -> Result<(Corpus, Vec<(String, String)>), CliError> {
    let mut hashes = Vec::new();
    let mut merged: Option<Corpus> = None;
    for src in &cfg.corpora {
        let (c, key, hash) = load_source(src)?;
        hashes.push((key, hash));
        merged = Some(match merged {
            None => c,
            Some(acc) => merge_corpora(&acc, &c)?,
        });
    }
    let corpus = merged.ok_or_else(|| CliError::Config("no corpora configured".into()))?;
    Ok((corpus, hashes))
}

/// Modifiers annotated anywhere in the corpus, in schema order.
pub fn annotated_schema(corpus: &Corpus) -> Result<ModifierSchema, CliError> {
    let mut names: BTreeSet<&str> = corpus.applicable_modifiers.iter().map(String::as_str).collect();
    for s in corpus.document_applicable.values() {
        names.extend(s.iter().map(String::as_str));
    }
    let ordered: Vec<&str> = corpus.schema.names().filter(|n| names.contains(n)).collect();
    if ordered.is_empty() {
        return Err(CliError::Data("corpus annotates no modifiers".into()));
    }
    Ok(corpus.schema.restrict(ordered)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrepareInfo {
    fingerprint: String,
    vocab_hash: String,
    features: FeatureConfig,
    corpus: String,
}

fn features_hash(f: &FeatureConfig) -> String {
    sha256_hex(&serde_json::to_vec(f).expect("features serialize"))
}

fn source_checkpoint(cfg: &ExperimentConfig) -> Result<Option<Checkpoint>, CliError> {
    cfg.source_checkpoint.as_deref().map(Checkpoint::load).transpose().map_err(CliError::from)
}

fn prepare_fingerprint(cfg: &ExperimentConfig, source_vocab: Option<&str>) -> String {
    let key = serde_json::json!({
        "corpora": cfg.corpora,
        "split": cfg.split,
        "features": cfg.features,
        "min_freq": cfg.min_freq,
        "source_vocab": source_vocab,
    });
    sha256_hex(key.to_string().as_bytes())
}

pub struct PrepareOutput {
    pub corpus: Corpus,
    pub splits: [Corpus; 3],
    pub vocab: TokenizerVocab,
    pub stats: Vec<CorpusStats>,
}

/// Splits, builds (or inherits) the vocabulary, encodes every split and
/// writes statistics.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareOutput, CliError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let mut mf = ManifestWriter::start(layout.manifest("prepare", "data"), "prepare", serde_json::to_value(cfg).unwrap())?;
    let result = prepare_inner(cfg, &layout, &mut mf);
    mf.finish(&result)?;
    result
}

fn prepare_inner(cfg: &ExperimentConfig, layout: &Layout, mf: &mut ManifestWriter) -> Result<PrepareOutput, CliError> {
    let t = Instant::now();
    let (corpus, hashes) = load_corpora(cfg)?;
    for (k, h) in hashes {
        mf.input(k, h);
    }
    let source = source_checkpoint(cfg)?;
    if let Some(p) = &cfg.source_checkpoint {
        mf.input(p.display().to_string(), hash_path(p)?);
    }
    let (train, dev, test) = split_corpus(&corpus, cfg.split.ratios, cfg.split.seed, cfg.split.mode)?;
    mf.phase("load_and_split", t.elapsed().as_secs_f64());

    let vocab = match &source {
        Some(ck) => {
            if cfg.features.max_len > ck.model.config.max_positions {
                return Err(CliError::Config(format!(
                    "max_len {} exceeds the source checkpoint's {} positions",
                    cfg.features.max_len, ck.model.config.max_positions
                )));
            }
            ck.vocab.clone()
        }
        None => build_vocab(&train, cfg.min_freq)?,
    };
    let t = Instant::now();
    let fh = features_hash(&cfg.features);
    for (name, split) in SPLITS.iter().zip([&train, &dev, &test]) {
        let dir = layout.split_dir(name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        write_jsonl(split, &dir)?;
        let examples = encode_corpus(split, &vocab, &cfg.features)?;
        write_cache(&layout.cache(name), &vocab.hash(), &fh, &examples)?;
        mf.artifact(format!("{name}_corpus"), &dir)?;
        mf.artifact(format!("{name}_cache"), &layout.cache(name))?;
    }
    mf.phase("featurize", t.elapsed().as_secs_f64());
    write_text(&layout.vocab(), &to_json_line(&vocab))?;
    mf.artifact("vocab", &layout.vocab())?;
    let info = PrepareInfo {
        fingerprint: prepare_fingerprint(cfg, source.as_ref().map(|c| c.vocab.hash()).as_deref()),
        vocab_hash: vocab.hash(),
        features: cfg.features,
        corpus: corpus.name.clone(),
    };
    write_text(&layout.prepare_info(), &to_json_line(&info))?;

    let mut stats = vec![corpus_stats(&corpus)];
    for (name, split) in SPLITS.iter().zip([&train, &dev, &test]) {
        let mut s = corpus_stats(split);
        s.corpus = format!("{}/{name}", s.corpus);
        stats.push(s);
    }
    let mut text = summary_table(&stats);
    text.push('\n');
    text.push_str(&detail_table(&stats[0]));
    let stats_txt = layout.prepared().join("stats.txt");
    let stats_json = layout.prepared().join("stats.json");
    write_text(&stats_txt, &text)?;
    write_text(&stats_json, &to_json_line(&stats))?;
    mf.artifact("stats", &stats_json)?;
    print!("{text}");
    Ok(PrepareOutput {
        corpus,
        splits: [train, dev, test],
        vocab,
        stats,
    })
}

/// Prepared splits and their encodings.
pub struct Prepared {
    pub corpus_name: String,
    pub splits: [Corpus; 3],
    pub encoded: [Vec<EncodedExample>; 3],
    pub vocab: TokenizerVocab,
    pub features: FeatureConfig,
}

pub fn load_prepared(cfg: &ExperimentConfig, source_vocab: Option<&TokenizerVocab>) -> Result<Prepared, CliError> {
    let layout = Layout::new(&cfg.output_dir);
    let stale = |why: &str| CliError::Data(format!("{}: {why}; run prepare with this config first", layout.prepared().display()));
    let info_path = layout.prepare_info();
    let info: PrepareInfo = match std::fs::read_to_string(&info_path) {
        Ok(t) => serde_json::from_str(&t).map_err(|e| stale(&e.to_string()))?,
        Err(_) => return Err(stale("no prepared data")),
    };
    if info.fingerprint != prepare_fingerprint(cfg, source_vocab.map(|v| v.hash()).as_deref()) {
        return Err(stale("prepared with a different corpus, split, feature or vocabulary setting"));
    }
    let vocab_path = layout.vocab();
    let vocab: TokenizerVocab = serde_json::from_str(&std::fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?)
        .map_err(|e| stale(&e.to_string()))?;
    if vocab.hash() != info.vocab_hash {
        return Err(stale("vocabulary changed since prepare"));
    }
    let fh = features_hash(&info.features);
    let mut splits = Vec::new();
    let mut encoded = Vec::new();
    for name in SPLITS {
        splits.push(load_corpus_dir(&layout.split_dir(name))?);
        encoded.push(read_cache(&layout.cache(name), &info.vocab_hash, &fh)?.ok_or_else(|| stale("cache missing or stale"))?);
    }
    let [a, b, c]: [Corpus; 3] = splits.try_into().expect("three splits");
    let [x, y, z]: [Vec<EncodedExample>; 3] = encoded.try_into().expect("three splits");
    Ok(Prepared {
        corpus_name: info.corpus,
        splits: [a, b, c],
        encoded: [x, y, z],
        vocab,
        features: info.features,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainMode {
    MultiTask,
    Transfer,
    SingleTask(String),
}

impl TrainMode {
    fn command(&self) -> &'static str {
        match self {
            TrainMode::MultiTask => "train",
            TrainMode::Transfer => "transfer",
            TrainMode::SingleTask(_) => "single-task",
        }
    }
}

/// Checkpoint name from the corpus chain, e.g. `mt-shr-oud`, with suffixes
/// for the no-hint encoding and focal loss.
pub fn checkpoint_name(cfg: &ExperimentConfig, mode: &TrainMode, chain: &[String]) -> String {
    if let Some(n) = &cfg.name {
        return n.clone();
    }
    let mut name = match mode {
        TrainMode::SingleTask(m) => format!("st-{}-{}", chain.join("-"), m.to_lowercase()),
        _ => format!("mt-{}", chain.join("-")),
    };
    if !cfg.features.hint {
        name.push_str("-nohint");
    }
    if matches!(cfg.train.loss, LossMode::Focal { .. }) {
        name.push_str("-fl");
    }
    name
}

pub struct TrainRun {
    pub name: String,
    pub checkpoint: PathBuf,
    pub outcome: TrainOutcome,
}

/// `train`, `transfer` and `single-task`.
pub fn cmd_train(cfg: &ExperimentConfig, mode: TrainMode) -> Result<TrainRun, CliError> {
    cfg.validate()?;
    match (&mode, &cfg.source_checkpoint) {
        (TrainMode::Transfer, None) => return Err(CliError::Usage("transfer needs --source-checkpoint".into())),
        (TrainMode::MultiTask | TrainMode::SingleTask(_), Some(_)) => {
            return Err(CliError::Usage("a source checkpoint is only used by transfer".into()))
        }
        _ => {}
    }
    let source = source_checkpoint(cfg)?;
    let prepared = load_prepared(cfg, source.as_ref().map(|c| &c.vocab))?;
    let mut chain = source.as_ref().map(|c| c.meta.chain.clone()).unwrap_or_default();
    chain.push(prepared.corpus_name.to_lowercase());
    let name = checkpoint_name(cfg, &mode, &chain);
    let layout = Layout::new(&cfg.output_dir);
    let mut mf = ManifestWriter::start(layout.manifest(mode.command(), &name), mode.command(), serde_json::to_value(cfg).unwrap())?;
    let result = train_inner(cfg, &mode, source.as_ref(), &prepared, chain, &name, &layout, &mut mf);
    mf.finish(&result)?;
    result
}

#[allow(clippy::too_many_arguments)]
fn train_inner(
    cfg: &ExperimentConfig,
    mode: &TrainMode,
    source: Option<&Checkpoint>,
    prepared: &Prepared,
    chain: Vec<String>,
    name: &str,
    layout: &Layout,
    mf: &mut ManifestWriter,
) -> Result<TrainRun, CliError> {
    for split in SPLITS {
        mf.input(format!("prepared/{split}"), hash_path(&layout.cache(split))?);
    }
    if let Some(p) = &cfg.source_checkpoint {
        mf.input(p.display().to_string(), hash_path(p)?);
    }
    let schema = annotated_schema(&prepared.splits[0])?;
    let encoder = EncoderConfig {
        vocab_size: prepared.vocab.len(),
        ..cfg.encoder.clone()
    };
    let init = || -> Result<MultiTaskModel, CliError> {
        Ok(match (mode, source) {
            (TrainMode::Transfer, Some(ck)) => {
                let t = transfer_load(ck, &schema, cfg.train.seed)?;
                log::info!("transfer: copied heads {:?}, fresh heads {:?}", t.copied, t.fresh);
                t.model
            }
            (TrainMode::SingleTask(m), _) => single_task_model(&schema, m, encoder.clone())?,
            _ => MultiTaskModel::new(schema.clone(), encoder.clone())?,
        })
    };
    let [train_x, dev_x, _] = &prepared.encoded;
    let model = init()?;
    log::info!("{name}: {} parameters, {} training examples", model.num_parameters(), train_x.len());
    let outcome = train(model, train_x, dev_x, &cfg.train)?;
    for r in &outcome.history {
        if let Some(s) = r.seconds {
            mf.phase(format!("epoch_{:03}", r.epoch), s);
        }
    }
    let run_dir = layout.run_dir(name);
    write_history(&run_dir.join("history.jsonl"), &outcome)?;
    mf.artifact("history", &run_dir.join("history.jsonl"))?;

    let mut meta = outcome.meta(chain, &cfg.train);
    let final_model = if cfg.refit_on_train_plus_dev {
        let combined: Vec<EncodedExample> = train_x.iter().chain(dev_x.iter()).cloned().collect();
        let refit_out = refit(init()?, &combined, &cfg.train, outcome.best_epoch)?;
        for r in &refit_out.history {
            if let Some(s) = r.seconds {
                mf.phase(format!("refit_epoch_{:03}", r.epoch), s);
            }
        }
        write_history(&run_dir.join("refit_history.jsonl"), &refit_out)?;
        mf.artifact("refit_history", &run_dir.join("refit_history.jsonl"))?;
        meta.epochs_run += refit_out.epochs_run;
        refit_out.model
    } else {
        outcome.model.clone()
    };
    let ck = Checkpoint::new(final_model, prepared.vocab.clone(), prepared.features, meta);
    let path = layout.checkpoint(name);
    ck.save(&path)?;
    mf.artifact("checkpoint", &path)?;
    println!("{name}: best epoch {} of {}, checkpoint {}", outcome.best_epoch, outcome.epochs_run, path.display());
    Ok(TrainRun {
        name: name.to_string(),
        checkpoint: path,
        outcome,
    })
}

fn write_history(path: &Path, outcome: &TrainOutcome) -> Result<(), CliError> {
    let mut out = String::new();
    for r in &outcome.history {
        let mut r = r.clone();
        r.seconds = None;
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    write_text(path, &out)
}

/// One record per instance and modifier shared by the checkpoint and the
/// corpus; gold labels are the corpus's resolved labels (defaults filled).
pub fn predict_corpus(ck: &Checkpoint, corpus: &Corpus) -> Result<Vec<PredictionRecord>, CliError> {
    let annotated = annotated_schema(corpus)?;
    let mut shared = Vec::new();
    for head in &ck.model.heads {
        if let Some(def) = annotated.get(&head.modifier) {
            if def.labels != head.labels {
                return Err(CliError::SchemaMismatch(format!(
                    "{}: checkpoint labels {:?}, corpus labels {:?}",
                    head.modifier, head.labels, def.labels
                )));
            }
            shared.push(head.modifier.clone());
        }
    }
    if shared.is_empty() {
        return Err(CliError::SchemaMismatch(format!(
            "checkpoint heads {:?} share no modifier with corpus {:?}",
            ck.model.head_names().collect::<Vec<_>>(),
            annotated.names().collect::<Vec<_>>()
        )));
    }
    let uncovered: Vec<&str> = annotated.names().filter(|n| !shared.iter().any(|s| s == n)).collect();
    if !uncovered.is_empty() {
        log::warn!("checkpoint has no head for {uncovered:?}; those modifiers are not predicted");
    }
    let examples = encode_corpus(corpus, &ck.vocab, &ck.features)?;
    let preds = predict_all(&ck.model, &examples)?;
    let mut records = Vec::new();
    for (inst, pred) in corpus.instances.iter().zip(&preds) {
        for m in &shared {
            if let Some(gold) = corpus.resolved_label(inst, m) {
                records.push(PredictionRecord {
                    instance_id: inst.id.clone(),
                    modifier: m.clone(),
                    gold: gold.to_string(),
                    pred: pred[m].clone(),
                });
            }
        }
    }
    Ok(records)
}

pub fn cmd_predict(checkpoint: &Path, corpus_dir: &Path, out: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    let manifest = sibling(out, ".manifest.json");
    let mut mf = ManifestWriter::start(
        manifest,
        "predict",
        serde_json::json!({"checkpoint": checkpoint, "corpus": corpus_dir, "out": out}),
    )?;
    let result = (|| {
        mf.input(checkpoint.display().to_string(), hash_path(checkpoint)?);
        mf.input(corpus_dir.display().to_string(), hash_path(corpus_dir)?);
        let ck = Checkpoint::load(checkpoint)?;
        let corpus = load_corpus_dir(corpus_dir)?;
        let records = predict_corpus(&ck, &corpus)?;
        write_predictions(out, &records)?;
        mf.artifact("predictions", out)?;
        println!("{} predictions written to {}", records.len(), out.display());
        Ok(records)
    })();
    mf.finish(&result)?;
    result
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Scores predictions against a gold corpus. Every instance the corpus
/// annotates for a predicted modifier must be covered, and the gold labels
/// in the file must agree with the corpus.
pub fn evaluate_predictions(records: Vec<PredictionRecord>, gold: &Corpus, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let annotated = annotated_schema(gold)?;
    let present: BTreeSet<&str> = records.iter().map(|r| r.modifier.as_str()).collect();
    for m in &present {
        if annotated.get(m).is_none() {
            return Err(CliError::SchemaMismatch(format!("modifier {m:?} is not annotated in the gold corpus")));
        }
    }
    for m in opts.exclude.keys() {
        if !present.contains(m.as_str()) {
            return Err(CliError::Usage(format!("--exclude-class names modifier {m:?}, which has no predictions")));
        }
    }
    let schema = annotated.restrict(annotated.names().filter(|n| present.contains(n)).collect::<Vec<_>>())?;
    let mut expected: BTreeMap<(&str, &str), &str> = BTreeMap::new();
    for inst in &gold.instances {
        for m in schema.names() {
            if let Some(l) = gold.resolved_label(inst, m) {
                expected.insert((inst.id.as_str(), m), l);
            }
        }
    }
    let mut seen = 0usize;
    for r in &records {
        match expected.get(&(r.instance_id.as_str(), r.modifier.as_str())) {
            Some(&l) if l == r.gold => seen += 1,
            Some(&l) => {
                return Err(CliError::Data(format!(
                    "{} / {}: gold {:?} in predictions, {:?} in corpus",
                    r.instance_id, r.modifier, r.gold, l
                )))
            }
            None => {
                return Err(CliError::Data(format!(
                    "{} / {}: not an annotated instance of the gold corpus",
                    r.instance_id, r.modifier
                )))
            }
        }
    }
    if seen != expected.len() {
        return Err(CliError::Data(format!(
            "predictions cover {seen} of {} annotated instance-modifier pairs",
            expected.len()
        )));
    }
    let set = PredictionSet::new(schema, records)?;
    Ok(build_report(&set, opts)?)
}

pub fn cmd_eval(predictions: &Path, gold_dir: &Path, opts: &EvalOptions, out_prefix: &Path) -> Result<EvalReport, CliError> {
    let mut mf = ManifestWriter::start(
        sibling(out_prefix, ".manifest.json"),
        "eval",
        serde_json::json!({"predictions": predictions, "gold": gold_dir, "options": opts}),
    )?;
    let result = (|| {
        mf.input(predictions.display().to_string(), hash_path(predictions)?);
        mf.input(gold_dir.display().to_string(), hash_path(gold_dir)?);
        let records = read_predictions(predictions)?;
        let gold = load_corpus_dir(gold_dir)?;
        let report = evaluate_predictions(records, &gold, opts)?;
        let (json, txt) = (sibling(out_prefix, ".json"), sibling(out_prefix, ".txt"));
        write_text(&json, &report.to_json())?;
        write_text(&txt, &report.to_text())?;
        mf.artifact("report_json", &json)?;
        mf.artifact("report_text", &txt)?;
        print!("{}", report.to_text());
        Ok(report)
    })();
    mf.finish(&result)?;
    result
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    EvalReport::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_compare(a: &Path, b: &Path, yates: bool, out_prefix: &Path) -> Result<Comparison, CliError> {
    let mut mf = ManifestWriter::start(
        sibling(out_prefix, ".manifest.json"),
        "compare",
        serde_json::json!({"a": a, "b": b, "yates": yates}),
    )?;
    let result = (|| {
        mf.input(a.display().to_string(), hash_path(a)?);
        mf.input(b.display().to_string(), hash_path(b)?);
        let cmp = compare_reports(&read_report(a)?, &read_report(b)?, yates)?;
        let (json, txt) = (sibling(out_prefix, ".json"), sibling(out_prefix, ".txt"));
        write_text(&json, &cmp.to_json())?;
        write_text(&txt, &cmp.to_text())?;
        mf.artifact("comparison_json", &json)?;
        mf.artifact("comparison_text", &txt)?;
        print!("{}", cmp.to_text());
        Ok(cmp)
    })();
    mf.finish(&result)?;
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CorpusFormat {
    Jsonl,
    Standoff,
}

/// Generates a corpus and writes it with its cue table (`cues.json`).
pub fn cmd_synth(spec: &SynthSpec, format: CorpusFormat, out: &Path) -> Result<Corpus, CliError> {
    let mut mf = ManifestWriter::start(sibling(out, ".manifest.json"), "synth", serde_json::to_value(spec).unwrap())?;
    let result = (|| {
        let cfg = spec.to_config()?;
        let gen = generate_synthetic(&cfg, spec.seed)?;
        if out.exists() {
            std::fs::remove_dir_all(out).map_err(io_err(out))?;
        }
        match format {
            CorpusFormat::Jsonl => write_jsonl(&gen.corpus, out)?,
            CorpusFormat::Standoff => write_standoff(&gen.corpus, out)?,
        }
        let cues = sibling(out, ".cues.json");
        write_text(&cues, &to_json_line(&gen.cues))?;
        mf.artifact("corpus", out)?;
        mf.artifact("cues", &cues)?;
        println!("{} instances in {} documents written to {}", gen.corpus.len(), gen.corpus.documents.len(), out.display());
        Ok(gen.corpus)
    })();
    mf.finish(&result)?;
    result
}

pub fn cmd_stats(dirs: &[PathBuf], json_out: Option<&Path>) -> Result<Vec<CorpusStats>, CliError> {
    let mut stats = Vec::new();
    for d in dirs {
        stats.push(corpus_stats(&load_corpus_dir(d)?));
    }
    let mut text = summary_table(&stats);
    for s in &stats {
        text.push('\n');
        text.push_str(&detail_table(s));
    }
    print!("{text}");
    if let Some(p) = json_out {
        write_text(p, &to_json_line(&stats))?;
    }
    Ok(stats)
}
