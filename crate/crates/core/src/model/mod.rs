//! Desk-scale token classifier: hashed features, softmax regression, local
//! SGD training with an optional proximal term, BIO decoding and scoring.

mod bio;
mod features;
mod metrics;
mod params;
mod tagger;

pub use bio::{decode_entities, repair_tags, Tag, TaggedSentence};
pub use features::{featurize, fnv1a64};
pub use metrics::{count_predictions, evaluate, Counts, MetricLevel, Metrics};
pub use params::ParameterVector;
pub use tagger::{
    featurize_all, local_train, local_train_featurized, loss_and_grad, predict, predict_featurized,
    Featurized, TrainConfig, DEFAULT_FEATURE_DIM, NUM_CLASSES,
};
