//! Coordinate-wise median aggregation.

use super::{canonical, ClientUpdate};
use crate::error::Result;
use crate::model::ParameterVector;

pub(crate) fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    }
}

/// Per-coordinate median of the deltas; an even count averages the two middle
/// values. Example-count weights are ignored.
pub fn coordinate_median(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let sorted = canonical(updates)?;
    let dims = sorted[0].delta.dims();
    let mut column = vec![0.0; sorted.len()];
    let values = (0..dims)
        .map(|j| {
            for (slot, u) in column.iter_mut().zip(&sorted) {
                *slot = u.delta[j];
            }
            median_of(&mut column)
        })
        .collect();
    Ok(ParameterVector::from_raw(values))
}
