//! Parameter containers for the encoder and the classification heads.
//!
//! Gradients reuse the same containers, so every tensor can be walked in one
//! fixed order by name (see [`TensorRef`]).

use super::EncoderConfig;
use crate::util::derive_seed;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies (not for biases or norms).
    pub decay: bool,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    pub data: &'a mut [f64],
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// Projections are `hidden × hidden`, applied as `x · W`.
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    /// `hidden × feedforward`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `feedforward × hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

// (field, decays)
macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_gain, false);
        $m!(ln1_bias, false);
        $m!(wq, true);
        $m!(bq, false);
        $m!(wk, true);
        $m!(bk, false);
        $m!(wv, true);
        $m!(bv, false);
        $m!(wo, true);
        $m!(bo, false);
        $m!(ln2_gain, false);
        $m!(ln2_bias, false);
        $m!(w1, true);
        $m!(b1, false);
        $m!(w2, true);
        $m!(b2, false);
    };
}

impl LayerParams {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, f) = (cfg.hidden_size, cfg.feedforward_size);
        Self {
            ln1_gain: Array1::ones(h),
            ln1_bias: Array1::zeros(h),
            wq: normal_matrix(rng, h, h),
            bq: Array1::zeros(h),
            wk: normal_matrix(rng, h, h),
            bk: Array1::zeros(h),
            wv: normal_matrix(rng, h, h),
            bv: Array1::zeros(h),
            wo: normal_matrix(rng, h, h),
            bo: Array1::zeros(h),
            ln2_gain: Array1::ones(h),
            ln2_bias: Array1::zeros(h),
            w1: normal_matrix(rng, h, f),
            b1: Array1::zeros(f),
            w2: normal_matrix(rng, f, h),
            b2: Array1::zeros(h),
        }
    }

    fn zeros(cfg: &EncoderConfig) -> Self {
        let (h, f) = (cfg.hidden_size, cfg.feedforward_size);
        Self {
            ln1_gain: Array1::zeros(h),
            ln1_bias: Array1::zeros(h),
            wq: Array2::zeros((h, h)),
            bq: Array1::zeros(h),
            wk: Array2::zeros((h, h)),
            bk: Array1::zeros(h),
            wv: Array2::zeros((h, h)),
            bv: Array1::zeros(h),
            wo: Array2::zeros((h, h)),
            bo: Array1::zeros(h),
            ln2_gain: Array1::zeros(h),
            ln2_bias: Array1::zeros(h),
            w1: Array2::zeros((h, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, h)),
            b2: Array1::zeros(h),
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        macro_rules! push {
            ($f:ident, $d:expr) => {
                out.push(TensorRef {
                    name: format!("{prefix}.{}", stringify!($f)),
                    shape: self.$f.shape().to_vec(),
                    decay: $d,
                    data: self.$f.as_slice().expect("standard layout"),
                })
            };
        }
        layer_fields!(push);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        macro_rules! push {
            ($f:ident, $d:expr) => {
                out.push(TensorMut {
                    name: format!("{prefix}.{}", stringify!($f)),
                    shape: self.$f.shape().to_vec(),
                    decay: $d,
                    data: self.$f.as_slice_mut().expect("standard layout"),
                })
            };
        }
        layer_fields!(push);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embeddings: Array2<f64>,
    pub position_embeddings: Array2<f64>,
    pub segment_embeddings: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gain: Array1<f64>,
    pub final_bias: Array1<f64>,
}

impl EncoderParams {
    /// Normal(0, 0.02) embeddings and weights, zero biases, unit gains.
    pub fn init(cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "encoder"));
        let h = cfg.hidden_size;
        Self {
            token_embeddings: normal_matrix(&mut rng, cfg.vocab_size, h),
            position_embeddings: normal_matrix(&mut rng, cfg.max_positions, h),
            segment_embeddings: normal_matrix(&mut rng, 2, h),
            layers: (0..cfg.num_layers).map(|_| LayerParams::init(cfg, &mut rng)).collect(),
            final_gain: Array1::ones(h),
            final_bias: Array1::zeros(h),
        }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let h = cfg.hidden_size;
        Self {
            token_embeddings: Array2::zeros((cfg.vocab_size, h)),
            position_embeddings: Array2::zeros((cfg.max_positions, h)),
            segment_embeddings: Array2::zeros((2, h)),
            layers: (0..cfg.num_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            final_gain: Array1::zeros(h),
            final_bias: Array1::zeros(h),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (name, a) in [
            ("token_embeddings", &self.token_embeddings),
            ("position_embeddings", &self.position_embeddings),
            ("segment_embeddings", &self.segment_embeddings),
        ] {
            out.push(TensorRef {
                name: format!("encoder.{name}"),
                shape: a.shape().to_vec(),
                decay: true,
                data: a.as_slice().expect("standard layout"),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.tensors(&format!("encoder.layers.{i}"), &mut out);
        }
        for (name, a) in [("final_gain", &self.final_gain), ("final_bias", &self.final_bias)] {
            out.push(TensorRef {
                name: format!("encoder.{name}"),
                shape: a.shape().to_vec(),
                decay: false,
                data: a.as_slice().expect("standard layout"),
            });
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (name, a) in [
            ("token_embeddings", &mut self.token_embeddings),
            ("position_embeddings", &mut self.position_embeddings),
            ("segment_embeddings", &mut self.segment_embeddings),
        ] {
            out.push(TensorMut {
                name: format!("encoder.{name}"),
                shape: a.shape().to_vec(),
                decay: true,
                data: a.as_slice_mut().expect("standard layout"),
            });
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.tensors_mut(&format!("encoder.layers.{i}"), &mut out);
        }
        for (name, a) in [("final_gain", &mut self.final_gain), ("final_bias", &mut self.final_bias)] {
            out.push(TensorMut {
                name: format!("encoder.{name}"),
                shape: a.shape().to_vec(),
                decay: false,
                data: a.as_slice_mut().expect("standard layout"),
            });
        }
        out
    }
}

/// Linear-softmax head for one modifier: `softmax(W·h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub modifier: String,
    pub labels: Vec<String>,
    /// `num_labels × hidden`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassificationHead {
    /// Fresh head drawn from a stream derived from `seed` and the modifier
    /// name, so the same (seed, modifier) always yields the same head.
    pub fn init(modifier: &str, labels: &[String], hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("head/{modifier}")));
        Self {
            modifier: modifier.to_string(),
            labels: labels.to_vec(),
            weight: normal_matrix(&mut rng, labels.len(), hidden),
            bias: Array1::zeros(labels.len()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            modifier: self.modifier.clone(),
            labels: self.labels.clone(),
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef {
                name: format!("heads.{}.weight", self.modifier),
                shape: self.weight.shape().to_vec(),
                decay: true,
                data: self.weight.as_slice().expect("standard layout"),
            },
            TensorRef {
                name: format!("heads.{}.bias", self.modifier),
                shape: self.bias.shape().to_vec(),
                decay: false,
                data: self.bias.as_slice().expect("standard layout"),
            },
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            TensorMut {
                name: format!("heads.{}.weight", self.modifier),
                shape: self.weight.shape().to_vec(),
                decay: true,
                data: self.weight.as_slice_mut().expect("standard layout"),
            },
            TensorMut {
                name: format!("heads.{}.bias", self.modifier),
                shape: self.bias.shape().to_vec(),
                decay: false,
                data: self.bias.as_slice_mut().expect("standard layout"),
            },
        ]
    }
}

/// Gradient buffer mirroring a model's trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: EncoderParams,
    pub heads: Vec<ClassificationHead>,
}

impl Gradients {
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

    /// `self += other`, tensor by tensor in a fixed order.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
