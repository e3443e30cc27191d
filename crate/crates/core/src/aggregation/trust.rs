use super::ClientUpdate;
use crate::error::{FedError, Result};
use crate::model::ParameterVector;

/// Trust scores in the order the updates were given.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustWeights {
    pub weights: Vec<f64>,
    /// Set when every score was zero and uniform weights were substituted.
    pub fallback_uniform: bool,
}

impl TrustWeights {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            fallback_uniform: true,
        }
    }
}

/// ReLU-clipped cosine similarity of each delta against `server_reference`.
/// A zero-norm delta scores 0.
pub fn trust_weights<U: std::borrow::Borrow<ClientUpdate>>(
    updates: &[U],
    server_reference: &ParameterVector,
) -> Result<TrustWeights> {
    let ref_norm = server_reference.norm_l2();
    if ref_norm == 0.0 || !ref_norm.is_finite() {
        return Err(FedError::Config(
            "trust reference must be a non-zero finite vector".into(),
        ));
    }
    let mut weights = Vec::with_capacity(updates.len());
    for u in updates {
        let delta = &u.borrow().delta;
        delta.ensure_dims(server_reference.dims())?;
        let norm = delta.norm_l2();
        let w = if norm == 0.0 {
            0.0
        } else {
            (delta.dot(server_reference) / (norm * ref_norm))
                .clamp(-1.0, 1.0)
                .max(0.0)
        };
        weights.push(w);
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(TrustWeights::uniform(updates.len()));
    }
    Ok(TrustWeights {
        weights,
        fallback_uniform: false,
    })
}

#[cfg(test)]
mod tests {
    use super::super::update;
    use super::*;

    #[test]
    fn cosine_cases() {
        let r = ParameterVector::from_vec(vec![1.0, 2.0]).unwrap();
        let ups = [
            update("same", 1.0, vec![1.0, 2.0]),
            update("opposite", 1.0, vec![-1.0, -2.0]),
            update("orthogonal", 1.0, vec![2.0, -1.0]),
            update("zero", 1.0, vec![0.0, 0.0]),
        ];
        let t = trust_weights(&ups, &r).unwrap();
        assert!((t.weights[0] - 1.0).abs() < 1e-15);
        assert_eq!(&t.weights[1..], &[0.0, 0.0, 0.0]);
        assert!(!t.fallback_uniform);
    }

    #[test]
    fn all_zero_falls_back() {
        let r = ParameterVector::from_vec(vec![1.0, 0.0]).unwrap();
        let ups = [
            update("a", 1.0, vec![-1.0, 0.0]),
            update("b", 1.0, vec![0.0, 1.0]),
        ];
        let t = trust_weights(&ups, &r).unwrap();
        assert!(t.fallback_uniform);
        assert_eq!(t.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_reference_rejected() {
        let r = ParameterVector::zeros(2);
        assert!(trust_weights(&[update("a", 1.0, vec![1.0, 0.0])], &r).is_err());
    }
}
