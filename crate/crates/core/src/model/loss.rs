//! Per-head losses, their head-averaged total and the batch gradient.

use super::{encoder, head_logits, softmax, Gradients, ModelError, MultiTaskModel};
use crate::featurize::EncodedExample;
use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Examples per gradient work unit. Fixed so the reduction order does not
/// depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossMode {
    CrossEntropy,
    Focal { gamma: f64 },
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode::CrossEntropy
    }
}

// keeps NaN, unlike f64::max
fn clamp_prob(p: f64) -> f64 {
    if p < PROB_FLOOR {
        PROB_FLOOR
    } else {
        p
    }
}

pub fn cross_entropy(probs: &[f64], gold: usize) -> f64 {
    -clamp_prob(probs[gold]).ln()
}

/// `-(1 - p)^gamma * ln p` with `p` the gold probability.
pub fn focal_loss(probs: &[f64], gold: usize, gamma: f64) -> f64 {
    let p = clamp_prob(probs[gold]);
    -(1.0 - p).powf(gamma) * p.ln()
}

pub fn example_loss(probs: &[f64], gold: usize, mode: LossMode) -> f64 {
    match mode {
        LossMode::CrossEntropy => cross_entropy(probs, gold),
        LossMode::Focal { gamma } => focal_loss(probs, gold, gamma),
    }
}

/// Derivative of [`example_loss`] with respect to the logits.
fn logit_grad(probs: &[f64], gold: usize, mode: LossMode) -> Vec<f64> {
    let p = probs[gold];
    if p < PROB_FLOOR {
        // the clamp is flat here
        return vec![0.0; probs.len()];
    }
    let factor = match mode {
        LossMode::CrossEntropy => -1.0,
        LossMode::Focal { gamma } if gamma == 0.0 => -1.0,
        LossMode::Focal { gamma } => {
            let q = 1.0 - p;
            if q <= 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * p * p.ln() - q.powf(gamma)
            }
        }
    };
    probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| (if j == gold { 1.0 } else { 0.0 } - pj) * factor)
        .collect()
}

/// Mean of the per-head losses over the heads present in the map.
pub fn total_loss(per_head: &BTreeMap<String, f64>) -> Result<f64, ModelError> {
    if per_head.is_empty() {
        return Err(ModelError::NoActiveHeads);
    }
    Ok(per_head.values().sum::<f64>() / per_head.len() as f64)
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Mean over active heads of the per-head mean loss.
    pub loss: f64,
    /// Heads with at least one unmasked example.
    pub per_head_losses: BTreeMap<String, f64>,
    /// Unmasked examples per active head.
    pub active_counts: BTreeMap<String, usize>,
    pub grads: Option<Gradients>,
}

struct ExampleResult {
    // loss per head index, None when masked
    losses: Vec<Option<f64>>,
}

fn active_counts(model: &MultiTaskModel, batch: &[EncodedExample]) -> Result<Vec<usize>, ModelError> {
    let mut counts = vec![0usize; model.heads.len()];
    for ex in batch {
        model.check_example(ex)?;
        for (j, head) in model.heads.iter().enumerate() {
            if ex.is_active(&head.modifier) {
                let g = *ex
                    .gold
                    .get(&head.modifier)
                    .ok_or_else(|| ModelError::ShapeMismatch(format!("{}: no gold for active head", ex.instance_id)))?;
                if g >= head.num_labels() {
                    return Err(ModelError::ShapeMismatch(format!(
                        "{}: gold index {g} out of range for {}",
                        ex.instance_id, head.modifier
                    )));
                }
                counts[j] += 1;
            }
        }
    }
    Ok(counts)
}

fn dropout_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One example: forward, per-head losses and (optionally) the accumulation
/// of `coef_j * dl_j` into `grads`.
fn run_example(
    model: &MultiTaskModel,
    ex: &EncodedExample,
    mode: LossMode,
    coef: &[f64],
    rng: Option<ChaCha8Rng>,
    grads: Option<&mut Gradients>,
) -> Result<ExampleResult, ModelError> {
    let mut rng = rng;
    let cache = encoder::forward(
        &model.encoder,
        &model.config,
        &ex.token_ids,
        &ex.segment_ids,
        &ex.attention_mask,
        rng.as_mut(),
    );
    let h = cache.h_cls.view();
    let mut losses = Vec::with_capacity(model.heads.len());
    let mut dh = Array1::<f64>::zeros(h.len());
    let mut any = false;
    let want_grad = grads.is_some();
    let mut grads = grads;
    for (j, head) in model.heads.iter().enumerate() {
        let gold = match ex.gold.get(&head.modifier) {
            Some(&g) if ex.is_active(&head.modifier) => g,
            _ => {
                losses.push(None);
                continue;
            }
        };
        let probs = softmax(&head_logits(head, h)?);
        losses.push(Some(example_loss(&probs, gold, mode)));
        if let Some(g) = grads.as_deref_mut() {
            let dz = Array1::from(logit_grad(&probs, gold, mode)) * coef[j];
            let gh = &mut g.heads[j];
            gh.weight += &dz.view().insert_axis(Axis(1)).dot(&h.insert_axis(Axis(0)));
            gh.bias += &dz;
            dh += &head.weight.t().dot(&dz);
            any = true;
        }
    }
    if want_grad && any {
        let g = grads.expect("checked");
        encoder::backward(&model.encoder, &model.config, &cache, dh.view(), &mut g.encoder);
    }
    Ok(ExampleResult { losses })
}

fn reduce(
    model: &MultiTaskModel,
    counts: &[usize],
    results: impl Iterator<Item = ExampleResult>,
) -> Result<(f64, BTreeMap<String, f64>, BTreeMap<String, usize>), ModelError> {
    let mut sums = vec![0.0f64; counts.len()];
    for r in results {
        for (j, l) in r.losses.iter().enumerate() {
            if let Some(l) = l {
                sums[j] += l;
            }
        }
    }
    let mut per_head = BTreeMap::new();
    let mut active = BTreeMap::new();
    // head order, not name order, so the sum matches the gradient weights
    let mut total = 0.0;
    for (j, head) in model.heads.iter().enumerate() {
        if counts[j] > 0 {
            let mean = sums[j] / counts[j] as f64;
            total += mean;
            per_head.insert(head.modifier.clone(), mean);
            active.insert(head.modifier.clone(), counts[j]);
        }
    }
    if per_head.is_empty() {
        return Err(ModelError::NoActiveHeads);
    }
    Ok((total / per_head.len() as f64, per_head, active))
}

/// Loss of a batch without gradients or dropout.
pub fn batch_loss(model: &MultiTaskModel, batch: &[EncodedExample], mode: LossMode) -> Result<BatchOutput, ModelError> {
    let counts = active_counts(model, batch)?;
    let results: Vec<ExampleResult> = batch
        .par_iter()
        .map(|ex| run_example(model, ex, mode, &[], None, None))
        .collect::<Result<_, _>>()?;
    let (loss, per_head_losses, active_counts) = reduce(model, &counts, results.into_iter())?;
    Ok(BatchOutput {
        loss,
        per_head_losses,
        active_counts,
        grads: None,
    })
}

/// Loss and exact gradient of a batch. Masked heads receive zero gradient.
/// With `dropout_seed`, example `i` draws its dropout masks from a stream
/// fixed by `(seed, i)`.
pub fn backward(
    model: &MultiTaskModel,
    batch: &[EncodedExample],
    mode: LossMode,
    dropout_seed: Option<u64>,
) -> Result<BatchOutput, ModelError> {
    let counts = active_counts(model, batch)?;
    let n_active = counts.iter().filter(|&&k| k > 0).count();
    if n_active == 0 {
        return Err(ModelError::NoActiveHeads);
    }
    let coef: Vec<f64> = counts
        .iter()
        .map(|&k| if k == 0 { 0.0 } else { 1.0 / (k as f64 * n_active as f64) })
        .collect();

    let chunks: Vec<(Gradients, Vec<ExampleResult>)> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = model.zero_gradients();
            let mut rs = Vec::with_capacity(chunk.len());
            for (k, ex) in chunk.iter().enumerate() {
                let rng = dropout_seed.map(|s| dropout_rng(s, c * CHUNK + k));
                rs.push(run_example(model, ex, mode, &coef, rng, Some(&mut g))?);
            }
            Ok((g, rs))
        })
        .collect::<Result<_, ModelError>>()?;

    let mut grads: Option<Gradients> = None;
    let mut results = Vec::with_capacity(batch.len());
    for (g, rs) in chunks {
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.add_assign(&g),
        }
        results.extend(rs);
    }
    let (loss, per_head_losses, active_counts) = reduce(model, &counts, results.into_iter())?;
    Ok(BatchOutput {
        loss,
        per_head_losses,
        active_counts,
        grads: Some(grads.unwrap_or_else(|| model.zero_gradients())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ModifierDef, ModifierSchema};
    use crate::featurize::{encode, TokenizerVocab};
    use crate::model::EncoderConfig;
    use proptest::prelude::*;

    #[test]
    fn uniform_two_class_ce_is_ln2() {
        assert!((cross_entropy(&[0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_closed_form() {
        // 0.01 * -ln 0.9
        let expect = 0.01 * -(0.9f64).ln();
        let got = focal_loss(&[0.9, 0.1], 0, 2.0);
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 1.0536e-3).abs() < 1e-7);
        assert_eq!(focal_loss(&[0.9, 0.1], 0, 0.0), cross_entropy(&[0.9, 0.1], 0));
    }

    #[test]
    fn probability_clamp() {
        assert!((cross_entropy(&[1.0, 0.0], 1) - 12.0 * std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn total_loss_mean_and_empty() {
        let m: BTreeMap<String, f64> = [("a".to_string(), 0.4), ("b".to_string(), 0.8)].into();
        assert!((total_loss(&m).unwrap() - 0.6).abs() <= f64::EPSILON);
        assert!(matches!(total_loss(&BTreeMap::new()), Err(ModelError::NoActiveHeads)));
    }

    // finite-difference oracle for the logit gradient
    fn fd_logit_grad(logits: &[f64], gold: usize, mode: LossMode) -> Vec<f64> {
        let eps = 1e-6;
        (0..logits.len())
            .map(|j| {
                let mut a = logits.to_vec();
                let mut b = logits.to_vec();
                a[j] += eps;
                b[j] -= eps;
                (example_loss(&softmax(&a), gold, mode) - example_loss(&softmax(&b), gold, mode)) / (2.0 * eps)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn logit_grad_matches_fd(
            logits in proptest::collection::vec(-4.0f64..4.0, 2..6),
            gold_seed in 0usize..100,
            gamma in prop_oneof![Just(0.0), Just(0.5), Just(1.0), Just(2.0), 0.1f64..4.0],
        ) {
            let gold = gold_seed % logits.len();
            for mode in [LossMode::CrossEntropy, LossMode::Focal { gamma }] {
                let an = logit_grad(&softmax(&logits), gold, mode);
                let fd = fd_logit_grad(&logits, gold, mode);
                for (a, n) in an.iter().zip(&fd) {
                    prop_assert!((a - n).abs() < 1e-7, "{a} vs {n}");
                }
            }
        }

        #[test]
        fn losses_nonnegative(p in 0.0f64..=1.0, gamma in 0.0f64..5.0) {
            let probs = [p, 1.0 - p];
            prop_assert!(cross_entropy(&probs, 0) >= 0.0);
            prop_assert!(focal_loss(&probs, 0, gamma) >= 0.0);
            prop_assert!(focal_loss(&probs, 0, gamma) <= cross_entropy(&probs, 0) + 1e-15);
        }
    }

    fn setup(seed: u64) -> (MultiTaskModel, Vec<EncodedExample>) {
        let schema = ModifierSchema::new(vec![
            ModifierDef::new("neg", &["no", "yes"], "no"),
            ModifierDef::new("sev", &["u", "a", "b"], "u"),
            ModifierDef::new("unc", &["no", "yes"], "no"),
        ])
        .unwrap();
        let cfg = EncoderConfig {
            vocab_size: 30,
            hidden_size: 16,
            num_layers: 2,
            num_attention_heads: 4,
            feedforward_size: 32,
            max_positions: 16,
            dropout_rate: 0.1,
            seed,
        };
        let model = MultiTaskModel::new(schema, cfg).unwrap();
        let vocab = TokenizerVocab::from_tokens((0..26).map(|i| format!("w{i}")), true);
        let rows: [(&str, &str, &[(&str, usize)], &[&str]); 5] = [
            ("w1 w2 w3", "w2", &[("neg", 1), ("sev", 2)], &["unc"]),
            ("w4 w5", "w5", &[("neg", 0), ("sev", 0)], &["unc"]),
            ("w6 w7 w8 w9", "w8 w9", &[("sev", 1)], &["neg", "unc"]),
            ("w10", "w10", &[("neg", 1)], &["sev", "unc"]),
            ("w11 w12 w1", "", &[("neg", 0), ("sev", 0)], &["unc"]),
        ];
        let exs = rows
            .iter()
            .enumerate()
            .map(|(i, (a, b, gold, masked))| {
                let mut g = BTreeMap::new();
                let mut m = BTreeMap::new();
                for (k, v) in gold.iter() {
                    g.insert(k.to_string(), *v);
                    m.insert(k.to_string(), true);
                }
                for k in masked.iter() {
                    m.insert(k.to_string(), false);
                }
                let mut e = encode((a, b), &vocab, g, m, 16).unwrap();
                e.instance_id = format!("x{i}");
                e
            })
            .collect();
        (model, exs)
    }

    #[test]
    fn masked_head_gets_zero_gradient_and_no_loss() {
        let (model, exs) = setup(1);
        let out = backward(&model, &exs, LossMode::CrossEntropy, Some(3)).unwrap();
        assert!(!out.per_head_losses.contains_key("unc"));
        assert_eq!(out.active_counts["neg"], 4);
        assert_eq!(out.active_counts["sev"], 4);
        let g = out.grads.unwrap();
        assert_eq!(g.heads[2].weight.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
        assert_eq!(g.heads[2].bias.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
        assert!(g.heads[0].weight.iter().any(|v| *v != 0.0));
        let expect = (out.per_head_losses["neg"] + out.per_head_losses["sev"]) / 2.0;
        assert!((out.loss - expect).abs() < 1e-15);
    }

    #[test]
    fn all_masked_is_no_active_heads() {
        let (model, mut exs) = setup(1);
        for e in &mut exs {
            e.head_mask.values_mut().for_each(|v| *v = false);
        }
        assert!(matches!(backward(&model, &exs, LossMode::CrossEntropy, None), Err(ModelError::NoActiveHeads)));
        assert!(matches!(batch_loss(&model, &exs, LossMode::CrossEntropy), Err(ModelError::NoActiveHeads)));
    }

    #[test]
    fn changing_masked_gold_changes_nothing() {
        let (model, exs) = setup(2);
        let mut other = exs.clone();
        other[2].gold.insert("neg".into(), 1);
        let a = backward(&model, &exs, LossMode::CrossEntropy, Some(1)).unwrap();
        let b = backward(&model, &other, LossMode::CrossEntropy, Some(1)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn batch_loss_matches_backward_without_dropout() {
        let (model, exs) = setup(4);
        let a = backward(&model, &exs, LossMode::Focal { gamma: 2.0 }, None).unwrap();
        let b = batch_loss(&model, &exs, LossMode::Focal { gamma: 2.0 }).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.per_head_losses, b.per_head_losses);
    }

    #[test]
    fn dropout_is_seeded() {
        let (model, exs) = setup(4);
        let a = backward(&model, &exs, LossMode::CrossEntropy, Some(7)).unwrap();
        let b = backward(&model, &exs, LossMode::CrossEntropy, Some(7)).unwrap();
        let c = backward(&model, &exs, LossMode::CrossEntropy, Some(8)).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_ne!(a.loss, c.loss);
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    // Central differences over every parameter; dropout on with a fixed seed
    // so masks are identical in each evaluation.
    fn fd_check(seed: u64, mode: LossMode, dropout: Option<u64>) -> f64 {
        let (model, exs) = setup(seed);
        let loss_at = |m: &MultiTaskModel| match dropout {
            Some(_) => backward(m, &exs, mode, dropout).unwrap().loss,
            None => batch_loss(m, &exs, mode).unwrap().loss,
        };
        let analytic = backward(&model, &exs, mode, dropout).unwrap().grads.unwrap();
        let flat_a: Vec<f64> = analytic.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
        let total = flat_a.len();
        let step = (total / 600).max(1);
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut idx = 0;
        while idx < total {
            let mut plus = model.clone();
            let mut minus = model.clone();
            set_flat(&mut plus, idx, h);
            set_flat(&mut minus, idx, -h);
            let n = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(flat_a[idx], n));
            idx += step;
        }
        worst
    }

    fn set_flat(model: &mut MultiTaskModel, mut idx: usize, delta: f64) {
        for t in model.tensors_mut() {
            if idx < t.data.len() {
                t.data[idx] += delta;
                return;
            }
            idx -= t.data.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn gradient_check_ce() {
        let e = fd_check(11, LossMode::CrossEntropy, None);
        assert!(e < 1e-4, "max relative error {e}");
    }

    #[test]
    fn gradient_check_focal_with_dropout() {
        let e = fd_check(12, LossMode::Focal { gamma: 2.0 }, Some(5));
        assert!(e < 1e-4, "max relative error {e}");
    }
}
