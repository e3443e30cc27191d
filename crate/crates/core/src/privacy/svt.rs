//! Sparse-vector release of the largest-magnitude coordinates.

use rand::Rng;

use super::noise::laplace;
use crate::error::{FedError, Result};
use crate::model::ParameterVector;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    pub dims: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseDelta {
    pub fn to_dense(&self) -> ParameterVector {
        let mut out = ParameterVector::zeros(self.dims);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

/// Nearest-rank quantile of `|delta|`: the `ceil(q*n)`-th smallest magnitude.
pub fn magnitude_quantile(delta: &ParameterVector, fraction: f64) -> f64 {
    let mut mags: Vec<f64> = delta.as_slice().iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = ((fraction * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// Scans coordinates in index order and releases coordinate `i` when
/// `|delta_i| + Lap(4/eps * unit) >= threshold + Lap(2/eps * unit)`, stopping
/// after `budget_c` releases. An infinite epsilon disables the noise.
pub fn svt_select<R: Rng + ?Sized>(
    delta: &ParameterVector,
    threshold: f64,
    budget_c: usize,
    epsilon: f64,
    scale_unit: f64,
    rng: &mut R,
) -> Result<SparseDelta> {
    if budget_c < 1 {
        return Err(FedError::Config("svt: budget_c must be >= 1".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(FedError::Config(format!(
            "svt: epsilon must be > 0, got {epsilon}"
        )));
    }
    let noisy_threshold = threshold + laplace(2.0 / epsilon * scale_unit, rng);
    let query_scale = 4.0 / epsilon * scale_unit;
    let mut out = SparseDelta {
        dims: delta.dims(),
        indices: Vec::new(),
        values: Vec::new(),
    };
    for (i, &v) in delta.as_slice().iter().enumerate() {
        if out.indices.len() >= budget_c {
            break;
        }
        if v.abs() + laplace(query_scale, rng) >= noisy_threshold {
            out.indices.push(i);
            out.values.push(v);
        }
    }
    Ok(out)
}

/// SVT with the threshold set to the `threshold_fraction` quantile of
/// `|delta|` and the clip norm as noise unit.
pub fn svt_filter<R: Rng + ?Sized>(
    delta: &ParameterVector,
    threshold_fraction: f64,
    budget_c: usize,
    epsilon: f64,
    clip_norm: f64,
    rng: &mut R,
) -> Result<SparseDelta> {
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(FedError::Config(format!(
            "svt: threshold_fraction must be in (0,1], got {threshold_fraction}"
        )));
    }
    let threshold = magnitude_quantile(delta, threshold_fraction);
    svt_select(delta, threshold, budget_c, epsilon, clip_norm, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn unit_budget_releases_first_exceeder() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let s = svt_select(&pv(&[0.5, 2.0, 1.5]), 1.0, 1, f64::INFINITY, 1.0, &mut rng).unwrap();
        assert_eq!(s.indices, vec![1]);
        assert_eq!(s.values, vec![2.0]);
        assert_eq!(s.to_dense().as_slice(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn large_budget_releases_all_exceeders() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let s = svt_select(
            &pv(&[0.5, 2.0, 1.5, -3.0, 0.9]),
            1.0,
            10,
            f64::INFINITY,
            1.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(s.indices, vec![1, 2, 3]);
    }

    #[test]
    fn zero_budget_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(svt_select(&pv(&[1.0]), 0.5, 0, 1.0, 1.0, &mut rng).is_err());
        assert!(svt_filter(&pv(&[1.0]), 0.0, 1, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn quantile_nearest_rank() {
        let d = pv(&[-4.0, 1.0, 3.0, 2.0]);
        assert_eq!(magnitude_quantile(&d, 0.5), 2.0);
        assert_eq!(magnitude_quantile(&d, 1.0), 4.0);
        assert_eq!(magnitude_quantile(&d, 0.01), 1.0);
    }
}
