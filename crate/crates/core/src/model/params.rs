use std::ops::{Index, IndexMut};

use crate::error::{FedError, Result};

/// Flat dense vector of model weights, the unit exchanged between sites.
///
/// Layout for the tagger is class-major: `values[class * feature_dim + feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(dims: usize) -> Self {
        Self {
            values: vec![0.0; dims],
        }
    }

    /// Wraps `values`, rejecting empty vectors and non-finite entries.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(FedError::Config(
                "parameter vector must be non-empty".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedError::NonFinite("parameter vector"));
        }
        Ok(Self { values })
    }

    /// Wraps `values` without the finiteness check. Used on hot paths where the
    /// values come from arithmetic on already-validated vectors.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn ensure_dims(&self, expected: usize) -> Result<()> {
        if self.dims() != expected {
            return Err(FedError::Dimension {
                expected,
                got: self.dims(),
            });
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &Self) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dims(), other.dims());
        Self::from_raw(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Canonical byte serialization: little-endian f64 words.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

impl Index<usize> for ParameterVector {
    type Output = f64;

    fn index(&self, idx: usize) -> &f64 {
        &self.values[idx]
    }
}

impl IndexMut<usize> for ParameterVector {
    fn index_mut(&mut self, idx: usize) -> &mut f64 {
        &mut self.values[idx]
    }
}
