use super::ClientUpdate;
use crate::model::ParameterVector;

/// Rescales `delta` to exactly `max_norm` when its L2 norm exceeds it.
/// Vectors at or under the bound, including zero, pass through unchanged.
pub fn clip_to_norm(delta: &ParameterVector, max_norm: f64) -> ParameterVector {
    let norm = delta.norm_l2();
    if norm > max_norm {
        delta.scaled(max_norm / norm)
    } else {
        delta.clone()
    }
}

pub fn normalize_updates(updates: &[ClientUpdate], target_norm: f64) -> Vec<ClientUpdate> {
    updates
        .iter()
        .map(|u| ClientUpdate {
            delta: clip_to_norm(&u.delta, target_norm),
            ..u.clone()
        })
        .collect()
}
