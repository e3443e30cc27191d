//! Cross-site validation: every site scores the same global model on its
//! own held-out split.

use crate::model::{
    count_predictions, Counts, Metrics, ParameterVector, TaggedSentence, TrainConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SiteEval {
    pub site_id: String,
    pub sentences: u64,
    pub counts: Counts,
    pub entity: Metrics,
    pub token: Metrics,
}

impl SiteEval {
    pub fn from_counts(site_id: String, sentences: u64, counts: Counts) -> Self {
        Self {
            site_id,
            sentences,
            entity: counts.entity_metrics(),
            token: counts.token_metrics(),
            counts,
        }
    }
}

/// Sites with no held-out sentences are left out of the table.
pub fn cross_site_evaluate(
    params: &ParameterVector,
    sites: &[(String, Vec<TaggedSentence>)],
    config: &TrainConfig,
) -> Vec<SiteEval> {
    sites
        .iter()
        .filter(|(_, data)| !data.is_empty())
        .map(|(id, data)| {
            let counts = count_predictions(params, data, config);
            SiteEval::from_counts(id.clone(), data.len() as u64, counts)
        })
        .collect()
}

/// Micro-averaged counts over all rows.
pub fn pooled_counts(evals: &[SiteEval]) -> Counts {
    let mut total = Counts::default();
    for e in evals {
        total.merge(&e.counts);
    }
    total
}
