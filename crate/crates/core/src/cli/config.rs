//! Experiment configuration: one JSON document, environment overrides for
//! paths, then command-line flags.

use super::CliError;
use crate::corpus::{SplitMode, SplitRatios, SynthConfig, SynthLayout};
use crate::evaluate::EvalOptions;
use crate::featurize::FeatureConfig;
use crate::model::{EncoderConfig, LossMode};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub const ENV_OUTPUT_DIR: &str = "ENTMOD_OUTPUT_DIR";
pub const ENV_CORPORA: &str = "ENTMOD_CORPORA";
pub const ENV_SOURCE_CHECKPOINT: &str = "ENTMOD_SOURCE_CHECKPOINT";

/// A corpus directory (standoff or JSON lines) or a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusSource {
    Path(PathBuf),
    Synth { synth: SynthSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// `demo`, `shr` or `oud`.
    pub preset: String,
    pub instances: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modifiers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<SynthLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_rate: Option<f64>,
}

impl SynthSpec {
    pub fn to_config(&self) -> Result<SynthConfig, CliError> {
        let mut cfg = match self.preset.as_str() {
            "demo" => SynthConfig::small_demo(self.instances),
            "shr" => SynthConfig::share_like(self.instances),
            "oud" => SynthConfig::oud_like(self.instances),
            other => return Err(CliError::Config(format!("unknown synthetic preset {other:?} (demo, shr, oud)"))),
        };
        if let Some(mods) = &self.modifiers {
            let names: Vec<&str> = mods.iter().map(String::as_str).collect();
            for n in &names {
                if !cfg.modifiers.iter().any(|m| m.name == *n) {
                    return Err(CliError::Config(format!("preset {} has no modifier {n:?}", self.preset)));
                }
            }
            cfg = cfg.with_modifiers(&names);
        }
        if let Some(layout) = self.layout {
            cfg.layout = layout;
        }
        if let Some(r) = self.noise_rate {
            cfg.noise_rate = r;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: SplitRatios::default(),
            seed: 42,
            mode: SplitMode::ByEntity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the chain-derived checkpoint name.
    pub name: Option<String>,
    /// Merged in order when more than one is given.
    pub corpora: Vec<CorpusSource>,
    pub split: SplitConfig,
    pub features: FeatureConfig,
    /// Minimum training-split frequency for a vocabulary entry.
    pub min_freq: usize,
    /// `vocab_size` is taken from the vocabulary at run time.
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub source_checkpoint: Option<PathBuf>,
    pub refit_on_train_plus_dev: bool,
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            corpora: Vec::new(),
            split: SplitConfig::default(),
            features: FeatureConfig::default(),
            min_freq: 1,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            source_checkpoint: None,
            refit_on_train_plus_dev: false,
            eval: EvalOptions::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Flag values that override the config file. `None` leaves a key alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpora: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub before: Option<usize>,
    pub after: Option<usize>,
    pub max_len: Option<usize>,
    pub no_hint: bool,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub loss: Option<String>,
    pub gamma: Option<f64>,
    pub source_checkpoint: Option<PathBuf>,
    pub exclude_class: Vec<String>,
    pub include_default: bool,
    pub micro_include_default: bool,
    pub pooled_average: bool,
    pub refit_on_train_plus_dev: bool,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Config file (or defaults), then path variables from `env`, then flags.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        flags: &Overrides,
    ) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(v) = env(ENV_OUTPUT_DIR) {
            cfg.output_dir = PathBuf::from(v);
        }
        if let Some(v) = env(ENV_CORPORA) {
            cfg.corpora = std::env::split_paths(&v).map(CorpusSource::Path).collect();
        }
        if let Some(v) = env(ENV_SOURCE_CHECKPOINT) {
            cfg.source_checkpoint = Some(PathBuf::from(v));
        }
        cfg.apply(flags)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, f: &Overrides) -> Result<(), CliError> {
        if !f.corpora.is_empty() {
            self.corpora = f.corpora.iter().cloned().map(CorpusSource::Path).collect();
        }
        if let Some(v) = &f.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &f.name {
            self.name = Some(v.clone());
        }
        if let Some(s) = f.seed {
            self.split.seed = s;
            self.encoder.seed = s;
            self.train.seed = s;
        }
        if let Some(v) = f.before {
            self.features.before = v;
        }
        if let Some(v) = f.after {
            self.features.after = v;
        }
        if let Some(v) = f.max_len {
            self.features.max_len = v;
            self.encoder.max_positions = v;
        }
        if f.no_hint {
            self.features.hint = false;
        }
        if let Some(v) = f.lr {
            self.train.learning_rate = v;
        }
        if let Some(v) = f.weight_decay {
            self.train.weight_decay = v;
        }
        if let Some(v) = f.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = f.epochs {
            self.train.max_epochs = v;
        }
        if let Some(v) = f.patience {
            self.train.patience = v;
        }
        match (f.loss.as_deref(), f.gamma) {
            (Some("ce"), None) => self.train.loss = LossMode::CrossEntropy,
            (Some("ce"), Some(_)) => return Err(CliError::Usage("--gamma needs --loss focal".into())),
            (Some("focal"), g) => {
                let gamma = match (g, self.train.loss) {
                    (Some(g), _) => g,
                    (None, LossMode::Focal { gamma }) => gamma,
                    (None, LossMode::CrossEntropy) => 2.0,
                };
                self.train.loss = LossMode::Focal { gamma };
            }
            (Some(other), _) => return Err(CliError::Usage(format!("unknown loss {other:?} (ce, focal)"))),
            (None, Some(g)) => match self.train.loss {
                LossMode::Focal { .. } => self.train.loss = LossMode::Focal { gamma: g },
                LossMode::CrossEntropy => return Err(CliError::Usage("--gamma needs --loss focal".into())),
            },
            (None, None) => {}
        }
        if let Some(v) = &f.source_checkpoint {
            self.source_checkpoint = Some(v.clone());
        }
        for spec in &f.exclude_class {
            let (m, l) = parse_exclude(spec)?;
            self.eval.exclude.entry(m).or_insert_with(BTreeSet::new).insert(l);
        }
        if f.include_default {
            self.eval.include_default_in_macro = true;
        }
        if f.micro_include_default {
            self.eval.include_default_in_micro = true;
        }
        if f.pooled_average {
            self.eval.pooled_average = true;
        }
        if f.refit_on_train_plus_dev {
            self.refit_on_train_plus_dev = true;
        }
        Ok(())
    }

    /// Checks values and that every referenced path exists.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.corpora.is_empty() {
            return Err(CliError::Config("no corpora configured".into()));
        }
        for c in &self.corpora {
            match c {
                CorpusSource::Path(p) if !p.exists() => {
                    return Err(CliError::Config(format!("corpus path {} does not exist", p.display())))
                }
                CorpusSource::Synth { synth } => {
                    synth.to_config()?.validate()?;
                }
                _ => {}
            }
        }
        if let Some(p) = &self.source_checkpoint {
            if !p.is_file() {
                return Err(CliError::Config(format!("source checkpoint {} does not exist", p.display())));
            }
        }
        if self.min_freq == 0 {
            return Err(CliError::Config("min_freq must be at least 1".into()));
        }
        if self.encoder.max_positions < self.features.max_len {
            return Err(CliError::Config(format!(
                "encoder.max_positions {} is below features.max_len {}",
                self.encoder.max_positions, self.features.max_len
            )));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Parses `<modifier>:<label>`.
pub fn parse_exclude(spec: &str) -> Result<(String, String), CliError> {
    match spec.split_once(':') {
        Some((m, l)) if !m.is_empty() && !l.is_empty() => Ok((m.to_string(), l.to_string())),
        _ => Err(CliError::Usage(format!("--exclude-class expects <modifier>:<label>, got {spec:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"corpora": ["a", {"synth": {"preset": "demo", "instances": 10, "seed": 1}}],
                "train": {"learning_rate": 0.001}, "features": {"hint": false}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.batch_size, 64);
        assert!(!cfg.features.hint);
        assert_eq!(cfg.features.max_len, 144);
        assert_eq!(cfg.corpora[0], CorpusSource::Path("a".into()));
        assert!(matches!(cfg.corpora[1], CorpusSource::Synth { .. }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"learning_rate": 1}"#).is_err());
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"output_dir": "from-file", "train": {"max_epochs": 4}}"#).unwrap();
        let env = |k: &str| (k == ENV_OUTPUT_DIR).then(|| "from-env".to_string());
        let cfg = ExperimentConfig::resolve(Some(&p), env, &Overrides::default()).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("from-env"));
        assert_eq!(cfg.train.max_epochs, 4);
        let flags = Overrides {
            output_dir: Some("from-flag".into()),
            epochs: Some(7),
            ..Default::default()
        };
        let cfg = ExperimentConfig::resolve(Some(&p), env, &flags).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("from-flag"));
        assert_eq!(cfg.train.max_epochs, 7);
    }

    #[test]
    fn env_does_not_touch_non_path_keys() {
        let env = |k: &str| Some(format!("{k}-value"));
        let cfg = ExperimentConfig::resolve(None, env, &Overrides::default()).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.source_checkpoint, Some(PathBuf::from("ENTMOD_SOURCE_CHECKPOINT-value")));
    }

    #[test]
    fn loss_flags() {
        let mut flags = Overrides {
            loss: Some("focal".into()),
            gamma: Some(1.5),
            ..Default::default()
        };
        let cfg = ExperimentConfig::resolve(None, no_env, &flags).unwrap();
        assert_eq!(cfg.train.loss, LossMode::Focal { gamma: 1.5 });
        flags.loss = Some("ce".into());
        assert!(matches!(ExperimentConfig::resolve(None, no_env, &flags), Err(CliError::Usage(_))));
        flags.loss = Some("hinge".into());
        flags.gamma = None;
        assert!(matches!(ExperimentConfig::resolve(None, no_env, &flags), Err(CliError::Usage(_))));
    }

    #[test]
    fn seed_flag_sets_every_seed() {
        let flags = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        let cfg = ExperimentConfig::resolve(None, no_env, &flags).unwrap();
        assert_eq!((cfg.split.seed, cfg.encoder.seed, cfg.train.seed), (9, 9, 9));
    }

    #[test]
    fn exclude_class_parsing() {
        assert_eq!(parse_exclude("Subject:other").unwrap(), ("Subject".into(), "other".into()));
        for bad in ["Subject", ":x", "x:"] {
            assert!(parse_exclude(bad).is_err());
        }
        let flags = Overrides {
            exclude_class: vec!["Subject:other".into(), "Subject:family".into()],
            include_default: true,
            ..Default::default()
        };
        let cfg = ExperimentConfig::resolve(None, no_env, &flags).unwrap();
        assert_eq!(cfg.eval.exclude["Subject"].len(), 2);
        assert!(cfg.eval.include_default_in_macro);
        assert!(!cfg.eval.include_default_in_micro);
    }

    #[test]
    fn missing_paths_fail_validation() {
        let cfg = ExperimentConfig {
            corpora: vec![CorpusSource::Path("/definitely/not/here".into())],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::default().validate(), Err(CliError::Config(_))));
    }
}
