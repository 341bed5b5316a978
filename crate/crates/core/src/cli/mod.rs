//! Command-line front end: experiment configs, run manifests and the
//! `prepare` / `train` / `transfer` / `single-task` / `predict` / `eval` /
//! `compare` / `synth` / `stats` subcommands.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod stats;

use crate::corpus::{CorpusError, SynthLayout};
use crate::evaluate::{EvalError, EvalOptions};
use crate::featurize::{CacheError, FeaturizeError};
use crate::model::ModelError;
use crate::train::TrainError;
use clap::{Args, Parser, Subcommand};
use commands::{CorpusFormat, Layout, TrainMode};
use config::{ExperimentConfig, Overrides, SynthSpec};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Train(TrainError::DivergedLoss { .. }) => EXIT_DIVERGED,
            CliError::Train(TrainError::InvalidConfig(_)) => EXIT_CONFIG,
            CliError::Model(ModelError::InvalidConfig(_)) => EXIT_CONFIG,
            CliError::Train(TrainError::Model(ModelError::InvalidConfig(_))) => EXIT_CONFIG,
            CliError::Corpus(CorpusError::InvalidConfig(_) | CorpusError::InvalidRatios(_)) => EXIT_CONFIG,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "entmod", version, about = "Multi-task entity modifier classification")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split corpora, build the vocabulary, encode every split, write statistics.
    Prepare(ExperimentArgs),
    /// Train a multi-task model on prepared data.
    Train(ExperimentArgs),
    /// Continue training from a source checkpoint on prepared data.
    Transfer(ExperimentArgs),
    /// Train a single-head model for one modifier (or each in turn).
    SingleTask {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, required_unless_present = "all_modifiers")]
        modifier: Option<String>,
        /// Train one model per annotated modifier.
        #[arg(long, conflicts_with = "modifier")]
        all_modifiers: bool,
    },
    /// Predict every annotated instance and modifier of a corpus.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory; defaults to a prepared split under --output-dir.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Prediction file; defaults to <output-dir>/predictions/<checkpoint>.<split>.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction file against a gold corpus.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// Gold corpus directory.
        #[arg(long)]
        gold: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        /// Output path prefix; `.json` and `.txt` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-modifier chi-square comparison of two reports.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Apply the continuity correction.
        #[arg(long)]
        yates: bool,
        /// Output path prefix; `.json` and `.txt` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with planted cues.
    Synth {
        /// demo, shr or oud.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Comma-separated subset of the preset's modifiers.
        #[arg(long, value_delimiter = ',')]
        modifiers: Option<Vec<String>>,
        #[arg(long, value_enum)]
        layout: Option<LayoutArg>,
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: CorpusFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entity and label counts for one or more corpora.
    Stats {
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LayoutArg {
    Window,
    SharedWindow,
}

impl From<LayoutArg> for SynthLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Window => SynthLayout::Window,
            LayoutArg::SharedWindow => SynthLayout::SharedWindow,
        }
    }
}

#[derive(Debug, Clone, Args, Default)]
pub struct EvalArgs {
    /// Leave <modifier>:<label> out of F1 (repeatable).
    #[arg(long = "exclude-class")]
    pub exclude_class: Vec<String>,
    /// Count the default class in macro F1.
    #[arg(long)]
    pub include_default: bool,
    /// Count the default class in micro F1.
    #[arg(long)]
    pub micro_include_default: bool,
    /// Pool instances across modifiers for the average row.
    #[arg(long)]
    pub pooled_average: bool,
}

impl EvalArgs {
    fn options(&self) -> Result<EvalOptions, CliError> {
        let mut opts = EvalOptions {
            include_default_in_macro: self.include_default,
            include_default_in_micro: self.micro_include_default,
            pooled_average: self.pooled_average,
            ..Default::default()
        };
        for spec in &self.exclude_class {
            let (m, l) = config::parse_exclude(spec)?;
            opts.exclude.entry(m).or_default().insert(l);
        }
        Ok(opts)
    }
}

/// Flags shared by the experiment commands; each mirrors a config key.
#[derive(Debug, Clone, Args, Default)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory (repeatable; merged in order).
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Checkpoint name instead of the chain-derived one.
    #[arg(long)]
    pub name: Option<String>,
    /// Sets the split, encoder and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub before: Option<usize>,
    #[arg(long)]
    pub after: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Drop the mention after the first separator.
    #[arg(long)]
    pub no_hint: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// ce or focal.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub source_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Refit on train plus dev for the best dev epoch count.
    #[arg(long)]
    pub refit_on_train_plus_dev: bool,
}

impl ExperimentArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            corpora: self.corpora.clone(),
            output_dir: self.output_dir.clone(),
            name: self.name.clone(),
            seed: self.seed,
            before: self.before,
            after: self.after,
            max_len: self.max_len,
            no_hint: self.no_hint,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            loss: self.loss.clone(),
            gamma: self.gamma,
            source_checkpoint: self.source_checkpoint.clone(),
            exclude_class: self.eval.exclude_class.clone(),
            include_default: self.eval.include_default,
            micro_include_default: self.eval.micro_include_default,
            pooled_average: self.eval.pooled_average,
            refit_on_train_plus_dev: self.refit_on_train_plus_dev,
        }
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::resolve(self.config.as_deref(), |k| std::env::var(k).ok(), &self.overrides())
    }
}

fn output_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var(config::ENV_OUTPUT_DIR).ok().map(PathBuf::from))
        .unwrap_or_else(|| ExperimentConfig::default().output_dir)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // a pool may already exist when called more than once in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Prepare(a) => commands::cmd_prepare(&a.resolve()?).map(|_| ()),
        Command::Train(a) => commands::cmd_train(&a.resolve()?, TrainMode::MultiTask).map(|_| ()),
        Command::Transfer(a) => commands::cmd_train(&a.resolve()?, TrainMode::Transfer).map(|_| ()),
        Command::SingleTask {
            exp,
            modifier,
            all_modifiers,
        } => {
            let cfg = exp.resolve()?;
            let modifiers = match modifier {
                Some(m) => vec![m],
                None if all_modifiers => {
                    let prepared = commands::load_prepared(&cfg, None)?;
                    let schema = commands::annotated_schema(&prepared.splits[0])?;
                    schema.names().map(String::from).collect()
                }
                None => return Err(CliError::Usage("single-task needs --modifier or --all-modifiers".into())),
            };
            for m in modifiers {
                commands::cmd_train(&cfg, TrainMode::SingleTask(m))?;
            }
            Ok(())
        }
        Command::Predict {
            checkpoint,
            corpus,
            split,
            output_dir: od,
            out,
        } => {
            let layout = Layout::new(&output_dir(od));
            let corpus = match corpus {
                Some(c) => c,
                None if commands::SPLITS.contains(&split.as_str()) => layout.split_dir(&split),
                None => return Err(CliError::Usage(format!("--split must be one of {:?}", commands::SPLITS))),
            };
            let out = out.unwrap_or_else(|| layout.predictions(&format!("{}.{split}", file_stem(&checkpoint))));
            commands::cmd_predict(&checkpoint, &corpus, &out).map(|_| ())
        }
        Command::Eval {
            predictions,
            gold,
            eval,
            out,
        } => {
            let out = out.unwrap_or_else(|| Layout::new(&output_dir(None)).report(&file_stem(&predictions)));
            commands::cmd_eval(&predictions, &gold, &eval.options()?, &out).map(|_| ())
        }
        Command::Compare { a, b, yates, out } => commands::cmd_compare(&a, &b, yates, &out).map(|_| ()),
        Command::Synth {
            preset,
            instances,
            seed,
            modifiers,
            layout,
            noise_rate,
            format,
            out,
        } => {
            let spec = SynthSpec {
                preset,
                instances,
                seed,
                modifiers,
                layout: layout.map(Into::into),
                noise_rate,
            };
            commands::cmd_synth(&spec, format, &out).map(|_| ())
        }
        Command::Stats { corpora, json } => commands::cmd_stats(&corpora, json.as_deref()).map(|_| ()),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::Config("x".into()).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::Data("x".into()).exit_code(), EXIT_DATA);
        assert_eq!(CliError::Corpus(CorpusError::EmptyCorpus).exit_code(), EXIT_DATA);
        let diverged = TrainError::DivergedLoss {
            epoch: 1,
            step: 2,
            value: f64::NAN,
        };
        assert_eq!(CliError::Train(diverged).exit_code(), EXIT_DIVERGED);
        assert_eq!(CliError::Train(TrainError::InvalidConfig("x".into())).exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["entmod", "no-such-command"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["entmod", "train", "--lr", "abc"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["entmod", "--help"]), EXIT_OK);
    }

    #[test]
    fn flags_reach_the_config() {
        let cli = Cli::try_parse_from([
            "entmod",
            "train",
            "--corpus",
            "a",
            "--loss",
            "focal",
            "--gamma",
            "2.0",
            "--no-hint",
            "--exclude-class",
            "Subject:other",
            "--include-default",
            "--max-len",
            "64",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&a.overrides()).unwrap();
        assert_eq!(cfg.train.loss, crate::model::LossMode::Focal { gamma: 2.0 });
        assert!(!cfg.features.hint);
        assert_eq!(cfg.features.max_len, 64);
        assert!(cfg.eval.exclude["Subject"].contains("other"));
        assert!(cfg.eval.include_default_in_macro);
    }
}
