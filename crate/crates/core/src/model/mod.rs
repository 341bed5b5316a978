//! The multi-task classifier: a shared encoder pooled at the leading CLS
//! position, one linear-softmax head per modifier, the head-averaged loss
//! and its exact gradient.

pub mod encoder;
mod loss;
mod params;

pub use loss::{
    backward, batch_loss, cross_entropy, example_loss, focal_loss, total_loss, BatchOutput, LossMode, PROB_FLOOR,
};
pub use params::{ClassificationHead, EncoderParams, Gradients, LayerParams, TensorMut, TensorRef, INIT_STD};

use crate::corpus::ModifierSchema;
use crate::featurize::EncodedExample;
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("no active heads in batch")]
    NoActiveHeads,
    #[error("model has no head for modifier {0:?}")]
    MissingHead(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_attention_heads: usize,
    pub feedforward_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            hidden_size: 64,
            num_layers: 2,
            num_attention_heads: 4,
            feedforward_size: 256,
            max_positions: 144,
            dropout_rate: 0.1,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: &str| Err(ModelError::InvalidConfig(s.to_string()));
        if self.vocab_size < 5 {
            return bad("vocab_size must cover the specials plus at least one token");
        }
        if self.hidden_size == 0 || self.num_attention_heads == 0 || self.feedforward_size == 0 {
            return bad("sizes must be positive");
        }
        if self.hidden_size % self.num_attention_heads != 0 {
            return bad("hidden_size must be divisible by num_attention_heads");
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Label distribution produced by one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    pub modifier: String,
    pub probs: Vec<f64>,
}

impl ProbDist {
    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn head_logits(head: &ClassificationHead, h_cls: ArrayView1<f64>) -> Result<Vec<f64>, ModelError> {
    if head.weight.ncols() != h_cls.len() || head.bias.len() != head.weight.nrows() {
        return Err(ModelError::ShapeMismatch(format!(
            "head {} is {}x{} (+{}), feature has {} entries",
            head.modifier,
            head.weight.nrows(),
            head.weight.ncols(),
            head.bias.len(),
            h_cls.len()
        )));
    }
    Ok((head.weight.dot(&h_cls) + &head.bias).to_vec())
}

pub fn head_forward(head: &ClassificationHead, h_cls: ArrayView1<f64>) -> Result<ProbDist, ModelError> {
    Ok(ProbDist {
        modifier: head.modifier.clone(),
        probs: softmax(&head_logits(head, h_cls)?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    /// Schema of the heads, in head order.
    pub schema: ModifierSchema,
    pub config: EncoderConfig,
    pub encoder: EncoderParams,
    pub heads: Vec<ClassificationHead>,
}

impl MultiTaskModel {
    /// Fresh model with one head per schema modifier.
    pub fn new(schema: ModifierSchema, config: EncoderConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let encoder = EncoderParams::init(&config);
        let heads = schema
            .modifiers
            .iter()
            .map(|m| ClassificationHead::init(&m.name, &m.labels, config.hidden_size, config.seed))
            .collect();
        Ok(Self {
            schema,
            config,
            encoder,
            heads,
        })
    }

    pub fn head(&self, modifier: &str) -> Option<&ClassificationHead> {
        self.heads.iter().find(|h| h.modifier == modifier)
    }

    pub fn head_names(&self) -> impl Iterator<Item = &str> {
        self.heads.iter().map(|h| h.modifier.as_str())
    }

    /// Checks heads against the schema and the encoder width.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let mut seen = BTreeSet::new();
        for h in &self.heads {
            let def = self
                .schema
                .get(&h.modifier)
                .ok_or_else(|| ModelError::ShapeMismatch(format!("head {} not in schema", h.modifier)))?;
            if def.labels != h.labels || h.weight.nrows() != h.labels.len() || h.bias.len() != h.labels.len() {
                return Err(ModelError::ShapeMismatch(format!("head {} label count", h.modifier)));
            }
            if h.weight.ncols() != self.config.hidden_size {
                return Err(ModelError::ShapeMismatch(format!("head {} width", h.modifier)));
            }
            if !seen.insert(h.modifier.as_str()) {
                return Err(ModelError::ShapeMismatch(format!("duplicate head {}", h.modifier)));
            }
        }
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            encoder: EncoderParams::zeros(&self.config),
            heads: self.heads.iter().map(ClassificationHead::zeros_like).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut t = self.encoder.tensors();
        for h in &self.heads {
            t.extend(h.tensors());
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut t = self.encoder.tensors_mut();
        for h in &mut self.heads {
            t.extend(h.tensors_mut());
        }
        t
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn check_example(&self, ex: &EncodedExample) -> Result<(), ModelError> {
        let n = ex.token_ids.len();
        if ex.segment_ids.len() != n || ex.attention_mask.len() != n || n == 0 {
            return Err(ModelError::ShapeMismatch("example arrays differ in length".into()));
        }
        if ex.attended_len() > self.config.max_positions {
            return Err(ModelError::ShapeMismatch(format!(
                "{} positions exceed max_positions {}",
                ex.attended_len(),
                self.config.max_positions
            )));
        }
        if let Some(&t) = ex.token_ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::ShapeMismatch(format!("token id {t} >= vocab size {}", self.config.vocab_size)));
        }
        if ex.segment_ids.iter().any(|&s| s > 1) {
            return Err(ModelError::ShapeMismatch("segment ids must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Pooled feature vector (final hidden state at position 0), dropout off.
pub fn encode_cls(model: &MultiTaskModel, example: &EncodedExample) -> Result<Array1<f64>, ModelError> {
    model.check_example(example)?;
    let cache = encoder::forward(
        &model.encoder,
        &model.config,
        &example.token_ids,
        &example.segment_ids,
        &example.attention_mask,
        None,
    );
    Ok(cache.h_cls)
}

/// Per-head distributions for one example.
pub fn predict_proba(model: &MultiTaskModel, example: &EncodedExample) -> Result<Vec<ProbDist>, ModelError> {
    let h = encode_cls(model, example)?;
    model.heads.iter().map(|head| head_forward(head, h.view())).collect()
}

/// Argmax label per head.
pub fn predict(model: &MultiTaskModel, example: &EncodedExample) -> Result<BTreeMap<String, String>, ModelError> {
    Ok(predict_proba(model, example)?
        .into_iter()
        .zip(&model.heads)
        .map(|(p, head)| (head.modifier.clone(), head.labels[p.argmax()].clone()))
        .collect())
}

/// Predicts a batch in parallel; output order follows the input.
pub fn predict_all(
    model: &MultiTaskModel,
    examples: &[EncodedExample],
) -> Result<Vec<BTreeMap<String, String>>, ModelError> {
    use rayon::prelude::*;
    examples.par_iter().map(|e| predict(model, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ModifierDef;
    use crate::featurize::{encode, TokenizerVocab, CLS, PAD};
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn head(w: Array2<f64>, b: Vec<f64>) -> ClassificationHead {
        let labels = (0..b.len()).map(|i| format!("l{i}")).collect();
        ClassificationHead {
            modifier: "m".into(),
            labels,
            weight: w,
            bias: Array1::from(b),
        }
    }

    fn tiny_model(seed: u64) -> MultiTaskModel {
        let schema = ModifierSchema::new(vec![
            ModifierDef::new("neg", &["no", "yes"], "no"),
            ModifierDef::new("sev", &["u", "a", "b"], "u"),
        ])
        .unwrap();
        let cfg = EncoderConfig {
            vocab_size: 40,
            hidden_size: 16,
            num_layers: 2,
            num_attention_heads: 4,
            feedforward_size: 32,
            max_positions: 24,
            dropout_rate: 0.0,
            seed,
        };
        MultiTaskModel::new(schema, cfg).unwrap()
    }

    fn vocab() -> TokenizerVocab {
        TokenizerVocab::from_tokens((0..36).map(|i| format!("t{i}")), true)
    }

    fn example(first: &str, second: &str) -> EncodedExample {
        encode((first, second), &vocab(), BTreeMap::new(), BTreeMap::new(), 24).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = head_forward(&head(Array2::zeros((2, 3)), vec![0.0, 0.0]), array![1.0, 2.0, 3.0].view()).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn bias_one_zero_closed_form() {
        let p = head_forward(&head(Array2::zeros((2, 3)), vec![1.0, 0.0]), array![1.0, 2.0, 3.0].view()).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.probs[0] - 0.73106).abs() < 1e-5);
        assert!((p.probs[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn head_shape_mismatch() {
        let err = head_forward(&head(Array2::zeros((2, 4)), vec![0.0, 0.0]), array![1.0, 2.0].view());
        assert!(matches!(err, Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn argmax_ties_take_first_label() {
        let p = ProbDist { modifier: "m".into(), probs: vec![0.5, 0.5] };
        assert_eq!(p.argmax(), 0);
        let p = ProbDist { modifier: "m".into(), probs: vec![0.3, 0.7] };
        assert_eq!(p.argmax(), 1);
    }

    #[test]
    fn predict_argmax_and_tie_break() {
        let mut m = tiny_model(1);
        m.heads[0].weight.fill(0.0);
        m.heads[0].bias = array![0.7f64.ln(), 0.3f64.ln()];
        let ex = example("t1 t2", "t1");
        assert_eq!(predict(&m, &ex).unwrap()["neg"], "no");
        m.heads[0].bias = array![0.0, 0.0];
        assert_eq!(predict(&m, &ex).unwrap()["neg"], "no");
        assert_eq!(predict(&m, &ex).unwrap(), predict(&m, &ex).unwrap());
    }

    #[test]
    fn cls_only_example_is_finite() {
        let m = tiny_model(3);
        let mut ex = example("", "");
        ex.attention_mask.iter_mut().skip(1).for_each(|v| *v = 0);
        ex.token_ids.iter_mut().skip(1).for_each(|v| *v = PAD);
        assert_eq!(ex.token_ids[0], CLS);
        let h = encode_cls(&m, &ex).unwrap();
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn padding_ids_do_not_matter() {
        let m = tiny_model(5);
        let ex = example("t1 t2 t3", "t2");
        let mut other = ex.clone();
        let real = ex.attended_len();
        for (i, t) in other.token_ids.iter_mut().enumerate().skip(real) {
            *t = (i % 30) as u32 + 4;
        }
        assert_eq!(encode_cls(&m, &ex).unwrap(), encode_cls(&m, &other).unwrap());
    }

    #[test]
    fn interior_masked_key_is_ignored() {
        // a zero mask inside the attended prefix must hide that token
        let m = tiny_model(8);
        let mut a = example("t1 t2 t3", "t2");
        a.attention_mask[2] = 0;
        let mut b = a.clone();
        b.token_ids[2] = 30;
        let ha = encode_cls(&m, &a).unwrap();
        let hb = encode_cls(&m, &b).unwrap();
        assert!((&ha - &hb).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn second_sequence_changes_cls() {
        let mut cfg = EncoderConfig { vocab_size: 40, ..EncoderConfig::default() };
        cfg.seed = 42;
        cfg.dropout_rate = 0.0;
        let schema = ModifierSchema::new(vec![ModifierDef::new("neg", &["no", "yes"], "no")]).unwrap();
        let m = MultiTaskModel::new(schema, cfg).unwrap();
        let v = vocab();
        let a = encode(("t1 t2 t3", "t4"), &v, BTreeMap::new(), BTreeMap::new(), 144).unwrap();
        let b = encode(("t1 t2 t3", "t5"), &v, BTreeMap::new(), BTreeMap::new(), 144).unwrap();
        assert_ne!(encode_cls(&m, &a).unwrap(), encode_cls(&m, &b).unwrap());
    }

    #[test]
    fn out_of_vocab_id_is_shape_mismatch() {
        let m = tiny_model(1);
        let mut ex = example("t1", "t2");
        ex.token_ids[1] = 99;
        assert!(matches!(encode_cls(&m, &ex), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig { vocab_size: 40, ..EncoderConfig::default() };
        cfg.num_attention_heads = 5;
        assert!(cfg.validate().is_err());
        cfg.num_attention_heads = 4;
        cfg.num_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fresh_heads_are_reproducible() {
        let a = tiny_model(9);
        let b = tiny_model(9);
        assert_eq!(a, b);
        let labels: Vec<String> = vec!["no".into(), "yes".into()];
        assert_eq!(ClassificationHead::init("neg", &labels, 16, 9), a.heads[0]);
        assert_ne!(tiny_model(10).encoder, a.encoder);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-800.0f64..800.0, 2..9)) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        }

        #[test]
        fn softmax_shift_invariant(logits in proptest::collection::vec(-30.0f64..30.0, 2..9), c in -100.0f64..100.0) {
            let a = ProbDist { modifier: "m".into(), probs: softmax(&logits) };
            let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
            let b = ProbDist { modifier: "m".into(), probs: softmax(&shifted) };
            prop_assert_eq!(a.argmax(), b.argmax());
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn head_outputs_are_finite_for_finite_params(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let mut m = tiny_model(seed);
            for t in m.tensors_mut() {
                for v in t.data.iter_mut() {
                    *v *= scale;
                }
            }
            let ex = example("t1 t2 t3 t4", "t3");
            for p in predict_proba(&m, &ex).unwrap() {
                prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(p.probs.iter().all(|v| v.is_finite()));
            }
        }
    }
}
