use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::noise::gaussian_mechanism;
use super::svt::svt_filter;
use crate::aggregation::clip_to_norm;
use crate::error::{FedError, Result};
use crate::model::ParameterVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvtParams {
    pub threshold_fraction: f64,
    pub budget_c: usize,
    pub epsilon: f64,
}

/// A site's local privacy policy. Filters run in the order
/// clip, then DP or SVT, then masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SitePolicy {
    pub site_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svt: Option<SvtParams>,
    #[serde(default)]
    pub masking_enabled: bool,
}

impl SitePolicy {
    /// No filters at all.
    pub fn open(site_id: impl Into<String>) -> Self {
        Self {
            site_id: site_id.into(),
            clip_norm: None,
            dp: None,
            svt: None,
            masking_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| {
            Err(FedError::Config(format!(
                "policy `{}`: {msg}",
                self.site_id
            )))
        };
        if self.dp.is_some() && self.svt.is_some() {
            return err("at most one of dp and svt may be set".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return err(format!("clip_norm must be positive, got {c}"));
            }
        }
        if (self.dp.is_some() || self.svt.is_some()) && self.clip_norm.is_none() {
            return err("dp and svt require clip_norm".into());
        }
        if let Some(dp) = self.dp {
            if dp.epsilon.is_nan() || dp.epsilon <= 0.0 || !(dp.delta > 0.0 && dp.delta < 1.0) {
                return err("dp needs epsilon > 0 and delta in (0,1)".into());
            }
        }
        if let Some(svt) = self.svt {
            if !(svt.threshold_fraction > 0.0 && svt.threshold_fraction <= 1.0) {
                return err("svt threshold_fraction must be in (0,1]".into());
            }
            if svt.budget_c < 1 || svt.epsilon.is_nan() || svt.epsilon <= 0.0 {
                return err("svt needs budget_c >= 1 and epsilon > 0".into());
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let policy: SitePolicy =
            toml::from_str(text).map_err(|e| FedError::Config(format!("policy: {e}")))?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }

    /// Runs the numeric filters (clip, then DP or SVT). Masking needs the
    /// round's pairing and is applied by the caller afterwards.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        delta: &ParameterVector,
        rng: &mut R,
    ) -> Result<ParameterVector> {
        let mut out = match self.clip_norm {
            Some(c) => clip_to_norm(delta, c),
            None => delta.clone(),
        };
        if let (Some(dp), Some(c)) = (self.dp, self.clip_norm) {
            out = gaussian_mechanism(&out, c, dp.epsilon, dp.delta, rng)?;
        }
        if let (Some(svt), Some(c)) = (self.svt, self.clip_norm) {
            out = svt_filter(
                &out,
                svt.threshold_fraction,
                svt.budget_c,
                svt.epsilon,
                c,
                rng,
            )?
            .to_dense();
        }
        Ok(out)
    }

    pub fn is_open(&self) -> bool {
        self.clip_norm.is_none() && self.dp.is_none() && self.svt.is_none() && !self.masking_enabled
    }
}
