//! Geometric median via Weiszfeld iteration.

use super::{canonical, coordinate_median, ClientUpdate};
use crate::error::{FedError, Result};
use crate::model::ParameterVector;

/// Iterates closer than this to a data point snap onto it.
const SNAP_EPS: f64 = 1e-12;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `sum_i ||x - p_i||`
pub fn weiszfeld_objective(x: &[f64], points: &[&[f64]]) -> f64 {
    points.iter().map(|p| distance(x, p)).sum()
}

#[derive(Debug, Clone)]
pub struct GeoMedianTrace {
    pub median: ParameterVector,
    pub iterations: u32,
    /// Objective at the start point and after every iteration.
    pub objective: Vec<f64>,
    pub snapped: bool,
}

pub fn geometric_median(
    updates: &[ClientUpdate],
    tol: f64,
    max_iter: u32,
) -> Result<ParameterVector> {
    geometric_median_traced(updates, tol, max_iter).map(|t| t.median)
}

/// Weiszfeld iteration from the coordinate-median start point. Stops when the
/// step's L2 length drops below `tol` or after `max_iter` iterations.
pub fn geometric_median_traced(
    updates: &[ClientUpdate],
    tol: f64,
    max_iter: u32,
) -> Result<GeoMedianTrace> {
    let sorted = canonical(updates)?;
    if sorted.iter().any(|u| !u.delta.is_finite()) {
        return Err(FedError::NonFinite("geometric median input"));
    }
    let points: Vec<&[f64]> = sorted.iter().map(|u| u.delta.as_slice()).collect();
    let dims = points[0].len();

    let mut x = coordinate_median(updates)?.into_vec();
    let mut objective = vec![weiszfeld_objective(&x, &points)];
    let mut iterations = 0;

    loop {
        let dists: Vec<f64> = points.iter().map(|p| distance(&x, p)).collect();
        if let Some(i) = dists.iter().position(|&d| d < SNAP_EPS) {
            return Ok(GeoMedianTrace {
                median: ParameterVector::from_raw(points[i].to_vec()),
                iterations,
                objective,
                snapped: true,
            });
        }
        if iterations >= max_iter {
            break;
        }

        let mut next = vec![0.0; dims];
        let mut denom = 0.0;
        for (p, d) in points.iter().zip(&dists) {
            let w = 1.0 / d;
            denom += w;
            for (n, v) in next.iter_mut().zip(p.iter()) {
                *n += w * v;
            }
        }
        for n in &mut next {
            *n /= denom;
        }
        let step = distance(&next, &x);
        x = next;
        iterations += 1;
        objective.push(weiszfeld_objective(&x, &points));
        if step < tol {
            break;
        }
    }

    Ok(GeoMedianTrace {
        median: ParameterVector::from_raw(x),
        iterations,
        objective,
        snapped: false,
    })
}
