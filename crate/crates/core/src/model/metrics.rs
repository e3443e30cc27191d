use std::collections::BTreeSet;

use super::bio::{decode_entities, Tag, TaggedSentence};
use super::features::featurize;
use super::params::ParameterVector;
use super::tagger::{predict_featurized, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricLevel {
    EntityStrict,
    Token,
}

impl MetricLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricLevel::EntityStrict => "entity",
            MetricLevel::Token => "token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub level: MetricLevel,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Derives precision/recall/F1 from counts with the 0/0 -> 0 convention.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, level: MetricLevel) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            level,
        }
    }
}

/// Running TP/FP/FN counts at both levels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub entity: [u64; 3],
    pub token: [u64; 3],
}

impl Counts {
    pub fn add_sentence(&mut self, gold: &[Tag], pred: &[Tag]) {
        let g: BTreeSet<_> = decode_entities(gold).into_iter().collect();
        let p: BTreeSet<_> = decode_entities(pred).into_iter().collect();
        let tp = g.intersection(&p).count() as u64;
        self.entity[0] += tp;
        self.entity[1] += p.len() as u64 - tp;
        self.entity[2] += g.len() as u64 - tp;

        for (&gt, &pt) in gold.iter().zip(pred) {
            if gt == pt {
                if gt != Tag::O {
                    self.token[0] += 1;
                }
            } else {
                if pt != Tag::O {
                    self.token[1] += 1;
                }
                if gt != Tag::O {
                    self.token[2] += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        for i in 0..3 {
            self.entity[i] += other.entity[i];
            self.token[i] += other.token[i];
        }
    }

    pub fn entity_metrics(&self) -> Metrics {
        let [tp, fp, fn_] = self.entity;
        Metrics::from_counts(tp, fp, fn_, MetricLevel::EntityStrict)
    }

    pub fn token_metrics(&self) -> Metrics {
        let [tp, fp, fn_] = self.token;
        Metrics::from_counts(tp, fp, fn_, MetricLevel::Token)
    }
}

pub fn count_predictions(
    params: &ParameterVector,
    corpus: &[TaggedSentence],
    config: &TrainConfig,
) -> Counts {
    let mut counts = Counts::default();
    for sent in corpus {
        let feats = featurize(&sent.tokens, config.feature_dim, config.hash_seed);
        let pred = predict_featurized(params, config.feature_dim, &feats);
        counts.add_sentence(&sent.tags, &pred);
    }
    counts
}

/// Evaluates `params` on `corpus`, returning `(entity_strict, token)` metrics.
/// An empty corpus yields all-zero metrics.
pub fn evaluate(
    params: &ParameterVector,
    corpus: &[TaggedSentence],
    config: &TrainConfig,
) -> (Metrics, Metrics) {
    let counts = count_predictions(params, corpus, config);
    (counts.entity_metrics(), counts.token_metrics())
}
