//! Hashed-feature multinomial logistic tagger and its local trainer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bio::{Tag, TaggedSentence};
use super::features::featurize;
use super::params::ParameterVector;
use crate::error::{FedError, Result};

pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;
const MIN_FEATURE_DIM: usize = 1 << 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: u32,
    pub batch_size: usize,
    /// Proximal coefficient; zero gives plain SGD.
    pub fedprox_mu: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub hash_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 32,
            fedprox_mu: 0.0,
            seed: 0,
            feature_dim: DEFAULT_FEATURE_DIM,
            hash_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> usize {
        NUM_CLASSES * self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FedError::Config(format!("train: {msg}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be a non-negative finite number");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.fedprox_mu.is_finite() && self.fedprox_mu >= 0.0) {
            return bad("fedprox_mu must be non-negative");
        }
        if !self.feature_dim.is_power_of_two() || self.feature_dim < MIN_FEATURE_DIM {
            return bad("feature_dim must be a power of two >= 1024");
        }
        Ok(())
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector::zeros(self.dims())
    }
}

/// A sentence with its features precomputed.
#[derive(Debug, Clone)]
pub struct Featurized {
    pub features: Vec<Vec<u32>>,
    pub tags: Vec<Tag>,
}

pub fn featurize_all(sentences: &[TaggedSentence], config: &TrainConfig) -> Vec<Featurized> {
    sentences
        .iter()
        .map(|s| Featurized {
            features: featurize(&s.tokens, config.feature_dim, config.hash_seed),
            tags: s.tags.clone(),
        })
        .collect()
}

fn class_scores(params: &[f64], feature_dim: usize, feats: &[u32]) -> [f64; NUM_CLASSES] {
    let mut scores = [0.0; NUM_CLASSES];
    for (c, score) in scores.iter_mut().enumerate() {
        let row = &params[c * feature_dim..(c + 1) * feature_dim];
        *score = feats.iter().map(|&f| row[f as usize]).sum();
    }
    scores
}

fn softmax(scores: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.map(|s| (s - max).exp());
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

fn log_softmax_at(scores: &[f64; NUM_CLASSES], class: usize) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores[class] - lse
}

/// Dense gradient buffer that remembers which coordinates were written.
struct SparseAccumulator {
    dense: Vec<f64>,
    touched: Vec<usize>,
    marked: Vec<bool>,
}

impl SparseAccumulator {
    fn new(dims: usize) -> Self {
        Self {
            dense: vec![0.0; dims],
            touched: Vec::new(),
            marked: vec![false; dims],
        }
    }

    #[inline]
    fn add(&mut self, idx: usize, v: f64) {
        if !self.marked[idx] {
            self.marked[idx] = true;
            self.touched.push(idx);
        }
        self.dense[idx] += v;
    }

    fn clear(&mut self) {
        for &i in &self.touched {
            self.dense[i] = 0.0;
            self.marked[i] = false;
        }
        self.touched.clear();
    }
}

/// Cross-entropy over a batch, averaged per sentence (token losses are summed
/// within a sentence). Accumulates the gradient into `acc` and returns the loss.
fn cross_entropy_into(
    params: &[f64],
    batch: &[&Featurized],
    feature_dim: usize,
    acc: &mut SparseAccumulator,
) -> f64 {
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for sent in batch {
        for (feats, tag) in sent.features.iter().zip(&sent.tags) {
            let gold = tag.index();
            let scores = class_scores(params, feature_dim, feats);
            loss -= log_softmax_at(&scores, gold);
            let probs = softmax(scores);
            for (c, p) in probs.iter().enumerate() {
                let g = (p - if c == gold { 1.0 } else { 0.0 }) * inv;
                if g != 0.0 {
                    let base = c * feature_dim;
                    for &f in feats {
                        acc.add(base + f as usize, g);
                    }
                }
            }
        }
    }
    loss * inv
}

fn prox_loss(params: &[f64], reference: &[f64], mu: f64) -> f64 {
    0.5 * mu
        * params
            .iter()
            .zip(reference)
            .map(|(w, r)| (w - r) * (w - r))
            .sum::<f64>()
}

/// Loss and dense gradient over `batch`. When `config.fedprox_mu > 0` the
/// proximal term `mu/2 * ||params - reference||^2` is included; a missing
/// reference is treated as the zero vector.
pub fn loss_and_grad(
    params: &ParameterVector,
    batch: &[TaggedSentence],
    config: &TrainConfig,
    global_reference: Option<&ParameterVector>,
) -> Result<(f64, ParameterVector)> {
    params.ensure_dims(config.dims())?;
    if let Some(r) = global_reference {
        r.ensure_dims(config.dims())?;
    }
    let dims = config.dims();
    if batch.is_empty() {
        return Ok((0.0, ParameterVector::zeros(dims)));
    }
    let feats = featurize_all(batch, config);
    let refs: Vec<&Featurized> = feats.iter().collect();
    let mut acc = SparseAccumulator::new(dims);
    let mut loss = cross_entropy_into(params.as_slice(), &refs, config.feature_dim, &mut acc);
    let mut grad = acc.dense;
    if config.fedprox_mu > 0.0 {
        let zeros;
        let reference = match global_reference {
            Some(r) => r.as_slice(),
            None => {
                zeros = vec![0.0; dims];
                &zeros
            }
        };
        loss += prox_loss(params.as_slice(), reference, config.fedprox_mu);
        for ((g, w), r) in grad.iter_mut().zip(params.as_slice()).zip(reference) {
            *g += config.fedprox_mu * (w - r);
        }
    }
    Ok((loss, ParameterVector::from_raw(grad)))
}

/// Runs `local_epochs` of minibatch SGD over `shard` starting from `start`.
///
/// Batches are drawn from a per-epoch shuffle seeded by `config.seed`. Returns
/// the trained parameters and the number of examples seen
/// (`shard.len() * local_epochs`).
pub fn local_train(
    start: &ParameterVector,
    shard: &[TaggedSentence],
    config: &TrainConfig,
    global_reference: Option<&ParameterVector>,
) -> Result<(ParameterVector, u64)> {
    config.validate()?;
    if shard.is_empty() {
        return Err(FedError::EmptyShard);
    }
    let feats = featurize_all(shard, config);
    local_train_featurized(start, &feats, config, global_reference)
}

pub fn local_train_featurized(
    start: &ParameterVector,
    shard: &[Featurized],
    config: &TrainConfig,
    global_reference: Option<&ParameterVector>,
) -> Result<(ParameterVector, u64)> {
    let dims = config.dims();
    start.ensure_dims(dims)?;
    if shard.is_empty() {
        return Err(FedError::EmptyShard);
    }
    let reference = match global_reference {
        Some(r) => {
            r.ensure_dims(dims)?;
            Some(r.as_slice())
        }
        None => None,
    };
    let mut params = start.clone().into_vec();
    let mut acc = SparseAccumulator::new(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let lr = config.learning_rate;
    let mu = config.fedprox_mu;

    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Featurized> = chunk.iter().map(|&i| &shard[i]).collect();
            cross_entropy_into(&params, &batch, config.feature_dim, &mut acc);
            if mu > 0.0 {
                // Proximal pull evaluated at the pre-step parameters; the
                // cross-entropy part is already frozen in `acc`.
                match reference {
                    Some(r) => {
                        for (w, r) in params.iter_mut().zip(r) {
                            *w -= lr * mu * (*w - r);
                        }
                    }
                    None => {
                        for w in params.iter_mut() {
                            *w -= lr * mu * *w;
                        }
                    }
                }
            }
            for &i in &acc.touched {
                params[i] -= lr * acc.dense[i];
            }
            acc.clear();
        }
    }
    let seen = shard.len() as u64 * u64::from(config.local_epochs);
    Ok((ParameterVector::from_raw(params), seen))
}

/// Greedy per-token argmax prediction (ties resolve to the lower class index).
pub fn predict_featurized(
    params: &ParameterVector,
    feature_dim: usize,
    feats: &[Vec<u32>],
) -> Vec<Tag> {
    feats
        .iter()
        .map(|f| {
            let scores = class_scores(params.as_slice(), feature_dim, f);
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            Tag::from_index(best).expect("class index in range")
        })
        .collect()
}

pub fn predict(params: &ParameterVector, tokens: &[String], config: &TrainConfig) -> Vec<Tag> {
    let feats = featurize(tokens, config.feature_dim, config.hash_seed);
    predict_featurized(params, config.feature_dim, &feats)
}
