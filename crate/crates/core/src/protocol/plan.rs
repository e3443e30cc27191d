use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{FedError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: u64,
    pub invited: BTreeSet<String>,
    pub min_responses: usize,
    pub deadline_ms: u64,
    /// Masked rounds only aggregate with every invited client present.
    pub masked: bool,
}

impl RoundPlan {
    pub fn validate(&self, registered: &BTreeSet<String>) -> Result<()> {
        let k = self.invited.len();
        if self.min_responses == 0 || self.min_responses > k {
            return Err(FedError::Protocol(format!(
                "round {}: need 1 <= m <= k, got m={} k={k}",
                self.round, self.min_responses
            )));
        }
        if let Some(c) = self.invited.iter().find(|c| !registered.contains(*c)) {
            return Err(FedError::Protocol(format!(
                "round {}: `{c}` is not registered",
                self.round
            )));
        }
        Ok(())
    }
}

/// Samples `k` of the registered clients without replacement. The registry
/// is sorted first so the result depends only on the set and the rng.
pub fn plan_round<R: Rng + ?Sized>(
    round: u64,
    registry: &BTreeSet<String>,
    k: usize,
    m: usize,
    deadline_ms: u64,
    rng: &mut R,
) -> Result<RoundPlan> {
    if k > registry.len() {
        return Err(FedError::Protocol(format!(
            "cannot invite {k} clients from a registry of {}",
            registry.len()
        )));
    }
    if m == 0 || m > k {
        return Err(FedError::Protocol(format!(
            "need 1 <= m <= k, got m={m} k={k}"
        )));
    }
    let ids: Vec<&String> = registry.iter().collect();
    let invited = sample(rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();
    Ok(RoundPlan {
        round,
        invited,
        min_responses: m,
        deadline_ms,
        masked: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub invited: BTreeSet<String>,
    pub responded: BTreeSet<String>,
    pub late_discarded: BTreeSet<String>,
    pub strategy: String,
    pub aggregate_norm: f64,
    pub duration_ms: u64,
    pub aborted: bool,
}

pub(crate) fn join_ids<'a>(ids: impl IntoIterator<Item = &'a String>) -> String {
    let v: Vec<&str> = ids.into_iter().map(String::as_str).collect();
    if v.is_empty() {
        "-".to_string()
    } else {
        v.join(",")
    }
}

pub(crate) fn split_ids(s: &str) -> BTreeSet<String> {
    if s == "-" {
        BTreeSet::new()
    } else {
        s.split(',').map(String::from).collect()
    }
}

impl RoundRecord {
    /// One-line summary used in reports.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "round={} invited={} responded={} late={} strategy={} norm={:.6} duration_ms={}",
            self.round,
            self.invited.len(),
            self.responded.len(),
            self.late_discarded.len(),
            self.strategy,
            self.aggregate_norm,
            self.duration_ms
        );
        if self.aborted {
            s.push_str(" aborted");
        }
        s
    }
}
