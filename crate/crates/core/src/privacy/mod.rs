//! Client-side privacy filters and secure-summation masking.

mod masking;
mod noise;
mod policy;
mod svt;

pub use masking::{make_masks, mask_vector, ring_sum, MaskPairing, RingVector, FIXED_POINT_BITS};
pub use noise::{gaussian_mechanism, gaussian_sigma, laplace};
pub use policy::{DpParams, SitePolicy, SvtParams};
pub use svt::{magnitude_quantile, svt_filter, svt_select, SparseDelta};

use crate::model::ParameterVector;

/// L2 clipping; same semantics as update normalization on one vector.
pub fn clip_l2(delta: &ParameterVector, clip_norm: f64) -> ParameterVector {
    crate::aggregation::clip_to_norm(delta, clip_norm)
}
