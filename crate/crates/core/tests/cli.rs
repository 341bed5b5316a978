use entmod::cli::manifest::RunManifest;
use entmod::corpus::{write_jsonl, AnnotatedInstance, Corpus, Document, EntityMention, ModifierDef, ModifierSchema, Span};
use entmod::evaluate::{read_predictions, EvalReport};
use entmod::featurize::SEP;
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn entmod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entmod"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ENTMOD_OUTPUT_DIR")
        .env_remove("ENTMOD_CORPORA")
        .env_remove("ENTMOD_SOURCE_CHECKPOINT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = entmod(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small, fast experiment config.
fn write_config(dir: &Path, file: &str, corpora: serde_json::Value, out: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = json!({
        "corpora": corpora,
        "features": {"max_len": 64},
        "encoder": {"hidden_size": 16, "num_layers": 1, "num_attention_heads": 2,
                    "feedforward_size": 32, "max_positions": 64},
        "train": {"learning_rate": 0.003, "batch_size": 16, "max_epochs": 2, "patience": 0},
        "output_dir": out,
    });
    if let (Some(base), Some(more)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in more {
            base.insert(k.clone(), v.clone());
        }
    }
    let p = dir.join(file);
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn synth(preset: &str, n: usize, seed: u64) -> serde_json::Value {
    json!([{"synth": {"preset": preset, "instances": n, "seed": seed}}])
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn prepare_writes_stats_whose_rows_sum_to_entities_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let cfg = write_config(dir.path(), &format!("{run}.json"), synth("shr", 150, 3), &out, json!({}));
        let stdout = ok(&["prepare", "--config", s(&cfg)]);
        assert!(stdout.starts_with("Corpus"));
        let stats: Vec<serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(out.join("prepared/stats.json")).unwrap()).unwrap();
        for st in &stats {
            let n = st["entities"].as_u64().unwrap();
            for m in st["modifiers"].as_array().unwrap() {
                let counted: u64 = m["counts"].as_array().unwrap().iter().map(|c| c[1].as_u64().unwrap()).sum();
                assert_eq!(counted + m["not_applicable"].as_u64().unwrap(), n);
            }
        }
        assert_eq!(stats[0]["entities"], 150);
        let m = manifest(&out.join("manifests/prepare-data.json"));
        assert_eq!(m.status, entmod::cli::manifest::RunStatus::Ok);
        hashes.push(
            m.artifacts
                .iter()
                .map(|(k, a)| (k.clone(), a.sha256.clone()))
                .collect::<BTreeMap<_, _>>(),
        );
    }
    assert_eq!(hashes[0], hashes[1]);
    assert!(hashes[0].contains_key("train_cache"));
}

#[test]
fn stats_counts_negation_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let schema = ModifierSchema::new(vec![ModifierDef::new("Negation", &["no", "yes"], "no")]).unwrap();
    let doc = Document::new("d1", "no cough today");
    let mention = EntityMention::from_spans(&doc, vec![Span::new(3, 8)]).unwrap();
    let instances = (0..3000)
        .map(|i| AnnotatedInstance {
            id: format!("d1/T{i}"),
            mention: mention.clone(),
            labels: if i < 2523 {
                BTreeMap::from([("Negation".to_string(), "yes".to_string())])
            } else {
                BTreeMap::new()
            },
        })
        .collect();
    let corpus = Corpus {
        name: "OUD".into(),
        schema,
        documents: BTreeMap::from([("d1".to_string(), doc)]),
        instances,
        applicable_modifiers: BTreeSet::from(["Negation".to_string()]),
        document_applicable: BTreeMap::new(),
    };
    let cdir = dir.path().join("oud");
    write_jsonl(&corpus, &cdir).unwrap();
    let stdout = ok(&["stats", "--corpus", s(&cdir)]);
    let lines: Vec<&str> = stdout.lines().collect();
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    let row: Vec<&str> = lines[1].split_whitespace().collect();
    assert_eq!(header, ["Corpus", "Ents", "Negation"]);
    assert_eq!(row, ["OUD", "3000", "2523"]);
}

#[test]
fn transfer_chain_report_covers_the_target_modifiers() {
    let dir = tempfile::tempdir().unwrap();
    let a_out = dir.path().join("a");
    let a_cfg = write_config(dir.path(), "a.json", synth("shr", 120, 1), &a_out, json!({}));
    ok(&["prepare", "--config", s(&a_cfg)]);
    ok(&["train", "--config", s(&a_cfg)]);
    let src = a_out.join("checkpoints/mt-shr.ckpt");
    assert!(src.is_file());

    let b_out = dir.path().join("b");
    let b_cfg = write_config(
        dir.path(),
        "b.json",
        synth("oud", 120, 2),
        &b_out,
        json!({"source_checkpoint": src}),
    );
    ok(&["prepare", "--config", s(&b_cfg)]);
    ok(&["transfer", "--config", s(&b_cfg)]);
    let ck = b_out.join("checkpoints/mt-shr-oud.ckpt");
    let preds = b_out.join("p.jsonl");
    ok(&["predict", "--checkpoint", s(&ck), "--output-dir", s(&b_out), "--out", s(&preds)]);
    let rep = dir.path().join("rep");
    ok(&["eval", "--predictions", s(&preds), "--gold", s(&b_out.join("prepared/test")), "--out", s(&rep)]);
    let report = EvalReport::from_json(&std::fs::read_to_string(rep.with_extension("json")).unwrap()).unwrap();
    let mods: Vec<&str> = report.modifiers.iter().map(|m| m.modifier.as_str()).collect();
    assert_eq!(mods, ["Negation", "Subject", "Uncertainty", "Severity", "DocTime", "IllicitDrugUse"]);
    let ckpt = entmod::train::Checkpoint::load(&ck).unwrap();
    assert_eq!(ckpt.meta.chain, ["shr", "oud"]);

    // transfer refuses data prepared with another vocabulary
    let c_out = dir.path().join("c");
    let c_cfg = write_config(dir.path(), "c.json", synth("oud", 120, 2), &c_out, json!({}));
    ok(&["prepare", "--config", s(&c_cfg)]);
    let out = entmod(&["transfer", "--config", s(&c_cfg), "--source-checkpoint", s(&src)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn focal_flag_is_recorded_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "c.json", synth("demo", 80, 1), &out, json!({}));
    ok(&["prepare", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg), "--loss", "focal", "--gamma", "2.0", "--epochs", "1"]);
    let m = manifest(&out.join("manifests/train-mt-demo-fl.json"));
    assert_eq!(m.config["train"]["loss"], json!({"kind": "focal", "gamma": 2.0}));
    assert_eq!(m.config["train"]["max_epochs"], 1);
    assert!(out.join("checkpoints/mt-demo-fl.ckpt").is_file());
    assert_eq!(m.timings.phases.len(), 1);
}

#[test]
fn no_hint_flag_encodes_a_single_separator() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg_path = write_config(dir.path(), "c.json", synth("demo", 60, 1), &out, json!({}));
    for (flag, seps) in [(None, 2usize), (Some("--no-hint"), 1)] {
        let mut args = vec!["prepare", "--config", s(&cfg_path)];
        args.extend(flag);
        ok(&args);
        let cfg = entmod::cli::config::ExperimentConfig::resolve(
            Some(&cfg_path),
            |_| None,
            &entmod::cli::config::Overrides {
                no_hint: flag.is_some(),
                ..Default::default()
            },
        )
        .unwrap();
        let prepared = entmod::cli::commands::load_prepared(&cfg, None).unwrap();
        for split in &prepared.encoded {
            for ex in split {
                assert_eq!(ex.token_ids.iter().filter(|&&t| t == SEP).count(), seps);
                assert_eq!(ex.segment_ids.iter().any(|&s| s == 1), seps == 2);
            }
        }
    }
}

#[test]
fn self_evaluation_scores_one_and_identical_reports_compare_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "c.json", synth("shr", 100, 4), &out, json!({}));
    ok(&["prepare", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg), "--epochs", "1"]);
    ok(&["predict", "--checkpoint", s(&out.join("checkpoints/mt-shr.ckpt")), "--output-dir", s(&out)]);
    let pred_file = out.join("predictions/mt-shr.test.jsonl");
    let mut records = read_predictions(&pred_file).unwrap();
    let gold_dir = out.join("prepared/test");
    let gold = entmod::cli::commands::load_corpus_dir(&gold_dir).unwrap();
    let expected: usize = gold.instances.iter().map(|i| gold.applicable_for(i).len()).sum();
    assert_eq!(records.len(), expected);
    for r in &mut records {
        r.pred = r.gold.clone();
    }
    let oracle = dir.path().join("oracle.jsonl");
    entmod::evaluate::write_predictions(&oracle, &records).unwrap();
    let rep = dir.path().join("self");
    ok(&["eval", "--predictions", s(&oracle), "--gold", s(&gold_dir), "--out", s(&rep)]);
    let report = EvalReport::from_json(&std::fs::read_to_string(rep.with_extension("json")).unwrap()).unwrap();
    for m in &report.modifiers {
        assert_eq!(m.accuracy, 1.0);
        assert!(m.weighted_accuracy.is_none_or(|w| w == 1.0));
    }

    // a real (imperfect) report compared with itself
    let real = dir.path().join("real");
    ok(&["eval", "--predictions", s(&pred_file), "--gold", s(&gold_dir), "--out", s(&real)]);
    let cmp = dir.path().join("cmp");
    let text = ok(&["compare", "--a", s(&real.with_extension("json")), "--b", s(&real.with_extension("json")), "--out", s(&cmp)]);
    assert!(!text.contains('*'));
    let c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cmp.with_extension("json")).unwrap()).unwrap();
    for row in c["rows"].as_array().unwrap() {
        if let Some(x) = row["statistic"].as_f64() {
            assert_eq!(x, 0.0);
        }
    }
    assert!(c["rows"].as_array().unwrap().iter().any(|r| r["statistic"].as_f64() == Some(0.0)));
}

#[test]
fn compare_marks_significant_modifiers() {
    use entmod::evaluate::{build_report, EvalOptions, PredictionRecord, PredictionSet};
    let schema = ModifierSchema::new(vec![ModifierDef::new("Negation", &["no", "yes"], "no")]).unwrap();
    let make = |correct: usize| {
        let records = (0..100)
            .map(|i| PredictionRecord {
                instance_id: format!("i{i}"),
                modifier: "Negation".into(),
                gold: if i % 2 == 0 { "yes" } else { "no" }.into(),
                pred: if (i < correct) == (i % 2 == 0) { "yes" } else { "no" }.into(),
            })
            .collect();
        build_report(&PredictionSet::new(schema.clone(), records).unwrap(), &EvalOptions::default()).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    std::fs::write(&a, make(80).to_json()).unwrap();
    std::fs::write(&b, make(60).to_json()).unwrap();
    let text = ok(&["compare", "--a", s(&a), "--b", s(&b), "--out", s(&dir.path().join("c"))]);
    let row = text.lines().find(|l| l.starts_with("Negation")).unwrap();
    assert!(row.contains("80/100") && row.contains("60/100") && row.trim_end().ends_with('*'), "{row}");
    assert!(row.contains("9.5238"), "{row}");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    // usage and config errors
    assert_eq!(entmod(&["train", "--batch-size", "many"]).status.code(), Some(1));
    assert_eq!(entmod(&["prepare", "--config", "/no/such/config.json"]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"corpora": ["/no/such/corpus"]}"#).unwrap();
    assert_eq!(entmod(&["prepare", "--config", s(&bad)]).status.code(), Some(1));
    // data errors: training before prepare, mismatched schemas
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "c.json", synth("demo", 60, 1), &out, json!({}));
    assert_eq!(entmod(&["train", "--config", s(&cfg)]).status.code(), Some(2));
    ok(&["prepare", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg), "--epochs", "1"]);
    let oud = dir.path().join("oud");
    ok(&["synth", "--preset", "oud", "--instances", "20", "--modifiers", "DocTime", "--out", s(&oud)]);
    let mismatch = entmod(&[
        "predict",
        "--checkpoint",
        s(&out.join("checkpoints/mt-demo.ckpt")),
        "--corpus",
        s(&oud),
        "--out",
        s(&dir.path().join("p.jsonl")),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("schema mismatch"));
    // numerical failure
    let diverged = entmod(&["train", "--config", s(&cfg), "--lr", "1e200", "--name", "boom"]);
    assert_eq!(diverged.status.code(), Some(3));
    let m = manifest(&out.join("manifests/train-boom.json"));
    assert_eq!(m.status, entmod::cli::manifest::RunStatus::Failed);
    assert!(!out.join("checkpoints/boom.ckpt").exists());
}

#[test]
fn refit_and_single_task_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "c.json", synth("demo", 80, 5), &out, json!({}));
    ok(&["prepare", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg), "--refit-on-train-plus-dev", "--name", "refit"]);
    let history = std::fs::read_to_string(out.join("runs/refit/refit_history.jsonl")).unwrap();
    let ck = entmod::train::Checkpoint::load(&out.join("checkpoints/refit.ckpt")).unwrap();
    assert_eq!(history.lines().count(), ck.meta.best_epoch);
    assert!(!history.contains("seconds"));

    ok(&["single-task", "--config", s(&cfg), "--all-modifiers", "--epochs", "1"]);
    for m in ["negation", "uncertainty"] {
        let ck = entmod::train::Checkpoint::load(&out.join(format!("checkpoints/st-demo-{m}.ckpt"))).unwrap();
        assert_eq!(ck.model.heads.len(), 1);
    }
}

#[test]
fn env_overrides_paths_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth", "--preset", "demo", "--instances", "40", "--format", "standoff", "--out", s(&corpus)]);
    assert!(dir.path().join("corpus.cues.json").is_file());
    let env_out = dir.path().join("env-out");
    let status = Command::new(env!("CARGO_BIN_EXE_entmod"))
        .args(["prepare", "--max-len", "48"])
        .env("ENTMOD_CORPORA", &corpus)
        .env("ENTMOD_OUTPUT_DIR", &env_out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let m = manifest(&env_out.join("manifests/prepare-data.json"));
    assert_eq!(m.config["features"]["max_len"], 48);
    assert!(m.inputs.contains_key(s(&corpus)));
    let flag_out = dir.path().join("flag-out");
    let status = Command::new(env!("CARGO_BIN_EXE_entmod"))
        .args(["prepare", "--output-dir", s(&flag_out), "--max-len", "48"])
        .env("ENTMOD_CORPORA", &corpus)
        .env("ENTMOD_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(flag_out.join("prepared/train.cache").is_file());
}
