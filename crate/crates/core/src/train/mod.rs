//! Training loop, early stopping, single-task ablation and transfer between
//! schemas.

mod checkpoint;
mod optim;

pub use checkpoint::{round_to_f32, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use optim::{adamw_step, adamw_update, OptimizerState, BETA1, BETA2, EPSILON};

use crate::corpus::ModifierSchema;
use crate::evaluate::{f1_scores, F1Options, LabelPairs};
use crate::featurize::EncodedExample;
use crate::model::{self, ClassificationHead, EncoderConfig, LossMode, ModelError, MultiTaskModel};
use crate::util::{derive_seed, sha256_hex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at epoch {epoch}, step {step}: {value}")]
    DivergedLoss { epoch: usize, step: usize, value: f64 },
    #[error("unknown modifier {0:?}")]
    UnknownModifier(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("{path}: corrupt checkpoint: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    /// Mean over heads of macro F1, default class included.
    #[default]
    MacroF1,
    /// Mean over heads of micro F1 over non-default classes.
    MicroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping; 0 disables early
    /// stopping.
    pub patience: usize,
    pub loss: LossMode,
    pub seed: u64,
    pub early_stop_metric: EarlyStopMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            weight_decay: 1e-2,
            batch_size: 64,
            max_epochs: 10,
            patience: 3,
            loss: LossMode::CrossEntropy,
            seed: 42,
            early_stop_metric: EarlyStopMetric::MacroF1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: &str| Err(TrainError::InvalidConfig(s.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if let LossMode::Focal { gamma } = self.loss {
            if !(gamma.is_finite() && gamma >= 0.0) {
                return bad("gamma must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
    pub dev: BTreeMap<String, HeadMetrics>,
    /// Early-stopping score; `None` without a dev set.
    pub dev_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best epoch.
    pub model: MultiTaskModel,
    pub history: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl TrainOutcome {
    pub fn meta(&self, chain: Vec<String>, cfg: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta {
            chain,
            train_config: Some(cfg.clone()),
            train_fingerprint: cfg.fingerprint(),
            best_epoch: self.best_epoch,
            epochs_run: self.epochs_run,
            history: self.history.clone(),
        }
    }
}

/// Per-head dev metrics over the examples active for that head.
pub fn dev_metrics(model: &MultiTaskModel, dev: &[EncodedExample]) -> Result<BTreeMap<String, HeadMetrics>, TrainError> {
    let preds = model::predict_all(model, dev)?;
    let mut out = BTreeMap::new();
    for head in &model.heads {
        let def = model
            .schema
            .get(&head.modifier)
            .ok_or_else(|| TrainError::UnknownModifier(head.modifier.clone()))?;
        let mut pairs = LabelPairs {
            modifier: head.modifier.clone(),
            labels: head.labels.clone(),
            default_index: def.default_index(),
            gold: vec![],
            pred: vec![],
        };
        for (ex, p) in dev.iter().zip(&preds) {
            if let (true, Some(&g)) = (ex.is_active(&head.modifier), ex.gold.get(&head.modifier)) {
                pairs.gold.push(g);
                pairs.pred.push(def.label_index(&p[&head.modifier]).expect("head labels"));
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let macro_opts = F1Options {
            include_default_in_macro: true,
            ..Default::default()
        };
        let f = f1_scores(&pairs, &macro_opts).expect("default class always included");
        out.insert(
            head.modifier.clone(),
            HeadMetrics {
                n: pairs.len(),
                accuracy: pairs.accuracy().expect("nonempty"),
                micro_f1: f.micro,
                macro_f1: f.macro_,
            },
        );
    }
    Ok(out)
}

fn dev_score(metrics: &BTreeMap<String, HeadMetrics>, metric: EarlyStopMetric) -> Option<f64> {
    if metrics.is_empty() {
        return None;
    }
    let s: f64 = metrics
        .values()
        .map(|m| match metric {
            EarlyStopMetric::MacroF1 => m.macro_f1,
            EarlyStopMetric::MicroF1 => m.micro_f1,
        })
        .sum();
    Some(s / metrics.len() as f64)
}

/// Trains `model` with AdamW. After each epoch the dev score is computed;
/// the best-scoring parameters are returned. With an empty dev set every
/// epoch runs and the last one is returned.
pub fn train(
    mut model: MultiTaskModel,
    train_set: &[EncodedExample],
    dev_set: &[EncodedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut state = OptimizerState::new(&model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, MultiTaskModel)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<EncodedExample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let dropout_seed = derive_seed(cfg.seed, &format!("dropout/{epoch}/{step}"));
            let out = match model::backward(&model, &batch, cfg.loss, Some(dropout_seed)) {
                Ok(o) => o,
                Err(ModelError::NoActiveHeads) => {
                    log::debug!("epoch {epoch} step {step}: no active heads, skipped");
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let grads = out.grads.expect("backward returns gradients");
            if !out.loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    step,
                    value: out.loss,
                });
            }
            adamw_step(&mut model, &grads, &mut state, cfg.learning_rate, cfg.weight_decay);
            loss_sum += out.loss;
            steps += 1;
        }
        let dev = if dev_set.is_empty() {
            BTreeMap::new()
        } else {
            dev_metrics(&model, dev_set)?
        };
        let score = dev_score(&dev, cfg.early_stop_metric);
        let train_loss = if steps == 0 { 0.0 } else { loss_sum / steps as f64 };
        let seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss {train_loss:.5}, dev {}, {seconds:.1}s",
            score.map_or("-".to_string(), |s| format!("{s:.4}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            steps,
            dev,
            dev_score: score,
            seconds: Some(seconds),
        });

        match score {
            None => best = Some((f64::NEG_INFINITY, epoch, model.clone())),
            Some(s) => {
                if best.as_ref().map_or(true, |b| s > b.0) {
                    best = Some((s, epoch, model.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let epochs_run = history.len();
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        epochs_run,
    })
}

/// Fixed-length run over `data` with no dev set, for the final fit on
/// train plus dev.
pub fn refit(model: MultiTaskModel, data: &[EncodedExample], cfg: &TrainConfig, epochs: usize) -> Result<TrainOutcome, TrainError> {
    let cfg = TrainConfig {
        max_epochs: epochs,
        patience: 0,
        ..cfg.clone()
    };
    train(model, data, &[], &cfg)
}

/// A fresh model with a single head for `modifier`.
pub fn single_task_model(schema: &ModifierSchema, modifier: &str, config: EncoderConfig) -> Result<MultiTaskModel, TrainError> {
    let restricted = schema
        .restrict([modifier])
        .map_err(|_| TrainError::UnknownModifier(modifier.to_string()))?;
    Ok(MultiTaskModel::new(restricted, config)?)
}

/// Single-head training on `modifier`; otherwise the same pipeline as
/// [`train`].
pub fn train_single_task(
    schema: &ModifierSchema,
    modifier: &str,
    encoder: EncoderConfig,
    train_set: &[EncodedExample],
    dev_set: &[EncodedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let model = single_task_model(schema, modifier, encoder)?;
    train(model, train_set, dev_set, cfg)
}

#[derive(Debug, Clone)]
pub struct Transferred {
    pub model: MultiTaskModel,
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Builds a model for `target` from a source checkpoint: the encoder is
/// copied verbatim, heads whose name and ordered labels match are copied,
/// and every other head is initialized from `seed`.
pub fn transfer_load(source: &Checkpoint, target: &ModifierSchema, seed: u64) -> Result<Transferred, TrainError> {
    if source.format_version != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointVersionMismatch {
            found: source.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    target.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let config = EncoderConfig {
        seed,
        ..source.model.config.clone()
    };
    let mut heads = Vec::with_capacity(target.len());
    let mut copied = Vec::new();
    let mut fresh = Vec::new();
    for m in &target.modifiers {
        match source.model.head(&m.name) {
            Some(h) if h.labels == m.labels => {
                heads.push(h.clone());
                copied.push(m.name.clone());
            }
            other => {
                if other.is_some() {
                    log::warn!("head {}: label lists differ, initializing a fresh head", m.name);
                }
                heads.push(ClassificationHead::init(&m.name, &m.labels, config.hidden_size, seed));
                fresh.push(m.name.clone());
            }
        }
    }
    let model = MultiTaskModel {
        schema: target.clone(),
        config,
        encoder: source.model.encoder.clone(),
        heads,
    };
    model.validate()?;
    Ok(Transferred { model, copied, fresh })
}
