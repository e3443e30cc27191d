//! Server-side combination of client deltas into one global delta.
//!
//! All aggregators sort updates by client id before touching any numbers, so
//! results do not depend on arrival order.

mod fedavg;
mod geometric;
mod median;
mod normalize;
mod trust;

use serde::{Deserialize, Serialize};

pub use fedavg::fedavg;
pub use geometric::{
    geometric_median, geometric_median_traced, weiszfeld_objective, GeoMedianTrace,
};
pub use median::coordinate_median;
pub use normalize::{clip_to_norm, normalize_updates};
pub use trust::{trust_weights, TrustWeights};

use crate::error::{FedError, Result};
use crate::model::ParameterVector;

/// One client's contribution for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u64,
    /// Local example count.
    pub weight: f64,
    /// `new_local_params - global_params`
    pub delta: ParameterVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Fedavg,
    CoordMedian,
    GeoMedian,
    FedavgTrust,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::CoordMedian => "coord-median",
            StrategyKind::GeoMedian => "geo-median",
            StrategyKind::FedavgTrust => "fedavg-trust",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationStrategy {
    pub kind: StrategyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize_to: Option<f64>,
    pub geo_tol: f64,
    pub geo_max_iter: u32,
}

impl Default for AggregationStrategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Fedavg,
            normalize_to: None,
            geo_tol: 1e-6,
            geo_max_iter: 200,
        }
    }
}

impl AggregationStrategy {
    pub fn with_kind(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.normalize_to {
            if !(n.is_finite() && n > 0.0) {
                return Err(FedError::Config(
                    "strategy: normalize_to must be positive".into(),
                ));
            }
        }
        if !(self.geo_tol.is_finite() && self.geo_tol > 0.0) || self.geo_max_iter == 0 {
            return Err(FedError::Config(
                "strategy: geo_tol and geo_max_iter must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Applies optional normalization, then the selected aggregator.
    /// `reference` feeds trust scoring and is ignored by other kinds.
    pub fn aggregate(
        &self,
        updates: &[ClientUpdate],
        reference: Option<&ParameterVector>,
    ) -> Result<ParameterVector> {
        let normalized;
        let updates = match self.normalize_to {
            Some(target) => {
                normalized = normalize_updates(updates, target);
                &normalized[..]
            }
            None => updates,
        };
        match self.kind {
            StrategyKind::Fedavg => fedavg(updates),
            StrategyKind::CoordMedian => coordinate_median(updates),
            StrategyKind::GeoMedian => geometric_median(updates, self.geo_tol, self.geo_max_iter),
            StrategyKind::FedavgTrust => {
                let sorted = canonical(updates)?;
                let trust = match reference {
                    Some(r) if r.norm_l2() > 0.0 => trust_weights(&sorted, r)?,
                    _ => TrustWeights::uniform(sorted.len()),
                };
                let reweighted: Vec<ClientUpdate> = sorted
                    .iter()
                    .zip(&trust.weights)
                    .filter(|(_, t)| **t > 0.0)
                    .map(|(u, t)| ClientUpdate {
                        weight: u.weight * t,
                        ..(*u).clone()
                    })
                    .collect();
                fedavg(&reweighted)
            }
        }
    }
}

/// Validates a batch and returns it sorted by client id.
pub(crate) fn canonical(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates.first().ok_or(FedError::EmptyUpdates)?;
    let dims = first.delta.dims();
    for u in updates {
        u.delta.ensure_dims(dims)?;
        if u.round != first.round {
            return Err(FedError::Protocol(format!(
                "mixed rounds in aggregation: {} and {}",
                first.round, u.round
            )));
        }
        if !(u.weight.is_finite() && u.weight > 0.0) {
            return Err(FedError::InvalidWeight {
                client_id: u.client_id.clone(),
                weight: u.weight,
            });
        }
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    Ok(sorted)
}

#[cfg(test)]
pub(crate) fn update(id: &str, weight: f64, delta: Vec<f64>) -> ClientUpdate {
    ClientUpdate {
        client_id: id.to_string(),
        round: 0,
        weight,
        delta: ParameterVector::from_vec(delta).unwrap(),
    }
}
