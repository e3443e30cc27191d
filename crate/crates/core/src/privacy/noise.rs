use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FedError, Result};
use crate::model::ParameterVector;

/// Classic Gaussian-mechanism calibration:
/// `sigma = clip_norm * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn gaussian_sigma(clip_norm: f64, epsilon: f64, delta_dp: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(FedError::Config(format!(
            "dp: epsilon must be > 0, got {epsilon}"
        )));
    }
    if !(delta_dp > 0.0 && delta_dp < 1.0) {
        return Err(FedError::Config(format!(
            "dp: delta must be in (0,1), got {delta_dp}"
        )));
    }
    if !(clip_norm > 0.0 && clip_norm.is_finite()) {
        return Err(FedError::Config(format!(
            "dp: clip_norm must be > 0, got {clip_norm}"
        )));
    }
    Ok(clip_norm * (2.0 * (1.25 / delta_dp).ln()).sqrt() / epsilon)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate of an already-clipped
/// delta.
pub fn gaussian_mechanism<R: Rng + ?Sized>(
    delta: &ParameterVector,
    clip_norm: f64,
    epsilon: f64,
    delta_dp: f64,
    rng: &mut R,
) -> Result<ParameterVector> {
    let sigma = gaussian_sigma(clip_norm, epsilon, delta_dp)?;
    let mut out = delta.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| FedError::Config(format!("dp: {e}")))?;
    for v in out.as_mut_slice() {
        *v += normal.sample(rng);
    }
    Ok(out)
}

/// One draw from `Laplace(0, scale)` by inverse CDF. A zero scale returns 0.
pub fn laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    // u in (-0.5, 0.5]; reject the endpoint that would give ln(0)
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let a = 1.0 - 2.0 * u.abs();
        if a > 0.0 {
            return -scale * u.signum() * a.ln();
        }
    }
}
