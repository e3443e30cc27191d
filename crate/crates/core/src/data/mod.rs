//! Corpus loading and client sharding.

mod conll;
mod partition;
mod synth;

pub use conll::{load_conll, parse_conll, CorpusStats, TaggedCorpus};
pub use partition::{partition, PartitionMode, PartitionPlan};
pub use synth::synthetic_corpus;
