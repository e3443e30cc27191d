use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conll::TaggedCorpus;
use crate::error::{FedError, Result};
use crate::model::TaggedSentence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    EqualN,
    Ratio,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    pub n_clients: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ratios: Vec<u32>,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionPlan {
    pub fn equal(n_clients: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::EqualN,
            n_clients,
            ratios: Vec::new(),
            seed,
        }
    }

    pub fn ratio(ratios: Vec<u32>, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Ratio,
            n_clients: ratios.len(),
            ratios,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(FedError::Config(
                "partition: n_clients must be positive".into(),
            ));
        }
        if self.mode == PartitionMode::Ratio {
            if self.ratios.len() != self.n_clients {
                return Err(FedError::Config(format!(
                    "partition: {} ratios for {} clients",
                    self.ratios.len(),
                    self.n_clients
                )));
            }
            if self.ratios.contains(&0) || self.ratios.iter().sum::<u32>() != 100 {
                return Err(FedError::Config(
                    "partition: ratios must be positive and sum to 100".into(),
                ));
            }
        }
        Ok(())
    }

    /// Shard sizes for a corpus of `total` sentences.
    pub fn sizes(&self, total: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let n = self.n_clients;
        if total < n {
            return Err(FedError::Partition {
                sentences: total,
                clients: n,
            });
        }
        let sizes = match self.mode {
            PartitionMode::EqualN => {
                let (base, rem) = (total / n, total % n);
                (0..n).map(|i| base + usize::from(i < rem)).collect()
            }
            PartitionMode::Ratio => {
                // round-half-up of r*N/100 == floor((2rN + 100) / 200)
                let mut sizes: Vec<usize> = self.ratios[..n - 1]
                    .iter()
                    .map(|&r| (2 * r as usize * total + 100) / 200)
                    .collect();
                let used: usize = sizes.iter().sum();
                if used >= total {
                    return Err(FedError::Partition {
                        sentences: total,
                        clients: n,
                    });
                }
                sizes.push(total - used);
                sizes
            }
        };
        if sizes.contains(&0) {
            return Err(FedError::Partition {
                sentences: total,
                clients: n,
            });
        }
        Ok(sizes)
    }
}

/// Seeded shuffle of sentence order, then contiguous slicing into shards.
pub fn partition(corpus: &TaggedCorpus, plan: &PartitionPlan) -> Result<Vec<Vec<TaggedSentence>>> {
    let sizes = plan.sizes(corpus.len())?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));

    let mut shards = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for size in sizes {
        shards.push(
            order[offset..offset + size]
                .iter()
                .map(|&i| corpus.sentences[i].clone())
                .collect(),
        );
        offset += size;
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tag;

    fn corpus(n: usize) -> TaggedCorpus {
        let sentences = (0..n)
            .map(|i| TaggedSentence::new(vec![format!("w{i}")], vec![Tag::O]).unwrap())
            .collect();
        TaggedCorpus::new(sentences, "mem")
    }

    #[test]
    fn ratio_exact_percentages() {
        let plan = PartitionPlan::ratio(vec![90, 10], 1);
        let shards = partition(&corpus(100), &plan).unwrap();
        assert_eq!(
            shards.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![90, 10]
        );
    }

    #[test]
    fn equal_remainder_goes_first() {
        let plan = PartitionPlan::equal(3, 0);
        assert_eq!(plan.sizes(10).unwrap(), vec![4, 3, 3]);
    }

    #[test]
    fn round_half_up() {
        let plan = PartitionPlan::ratio(vec![50, 50], 0);
        assert_eq!(plan.sizes(3).unwrap(), vec![2, 1]);
        let plan = PartitionPlan::ratio(vec![75, 25], 0);
        assert_eq!(plan.sizes(10).unwrap(), vec![8, 2]);
    }

    #[test]
    fn too_few_sentences() {
        let plan = PartitionPlan::equal(4, 0);
        assert!(matches!(
            partition(&corpus(3), &plan),
            Err(FedError::Partition { .. })
        ));
        // 90/10 over 5 sentences leaves nothing for the last shard
        let plan = PartitionPlan::ratio(vec![90, 10], 0);
        assert!(plan.sizes(5).is_err());
    }

    #[test]
    fn invalid_ratios() {
        assert!(PartitionPlan::ratio(vec![50, 40], 0).validate().is_err());
        let mut plan = PartitionPlan::ratio(vec![50, 50], 0);
        plan.n_clients = 3;
        assert!(plan.validate().is_err());
    }
}
