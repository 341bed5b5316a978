use super::{AnnotatedInstance, Corpus, CorpusError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, dev: f64, test: f64) -> Self {
        Self { train, dev, test }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.test];
        if all.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(CorpusError::InvalidRatios(format!("{all:?} must all be positive")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidRatios(format!("{all:?} must sum to 1")));
        }
        Ok(())
    }

    /// Instance counts for a corpus of `n`: floors for train and dev, the
    /// remainder to test.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        // tolerate representation error such as 0.7 * 10 = 6.999…
        let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let dev = floor(self.dev).min(n - train);
        (train, dev, n - train - dev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Instances are shuffled and partitioned individually.
    #[default]
    ByEntity,
    /// Whole documents go to one split; sizes approximate the ratios.
    ByDocument,
}

/// Deterministic train/dev/test split.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: SplitRatios,
    seed: u64,
    mode: SplitMode,
) -> Result<(Corpus, Corpus, Corpus)> {
    ratios.validate()?;
    if corpus.instances.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = corpus.instances.len();
    let (n_train, n_dev, _) = ratios.counts(n);

    let (train, dev, test): (Vec<_>, Vec<_>, Vec<_>) = match mode {
        SplitMode::ByEntity => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let pick = |idx: &[usize]| -> Vec<AnnotatedInstance> {
                idx.iter().map(|&i| corpus.instances[i].clone()).collect()
            };
            (
                pick(&order[..n_train]),
                pick(&order[n_train..n_train + n_dev]),
                pick(&order[n_train + n_dev..]),
            )
        }
        SplitMode::ByDocument => {
            let mut by_doc: BTreeMap<&str, Vec<&AnnotatedInstance>> = BTreeMap::new();
            for inst in &corpus.instances {
                by_doc.entry(inst.mention.doc_id.as_str()).or_default().push(inst);
            }
            let mut docs: Vec<_> = by_doc.into_values().collect();
            docs.shuffle(&mut rng);
            let (mut tr, mut dv, mut te) = (Vec::new(), Vec::new(), Vec::new());
            for group in docs {
                let target = if tr.len() < n_train {
                    &mut tr
                } else if dv.len() < n_dev {
                    &mut dv
                } else {
                    &mut te
                };
                target.extend(group.into_iter().cloned());
            }
            (tr, dv, te)
        }
    };
    Ok((
        corpus.with_instances(&corpus.name, train),
        corpus.with_instances(&corpus.name, dev),
        corpus.with_instances(&corpus.name, test),
    ))
}
