//! Job vetting: every component a job references must be an allowed kind and
//! every numeric parameter must fall inside the manifest's bounds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Open or closed interval ends; unset sides are unbounded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub le: Option<f64>,
}

impl Bound {
    pub fn positive() -> Self {
        Bound {
            gt: Some(0.0),
            ..Bound::default()
        }
    }

    pub fn unit_open() -> Self {
        Bound {
            gt: Some(0.0),
            lt: Some(1.0),
            ..Bound::default()
        }
    }

    fn check(&self, v: f64) -> Option<String> {
        if !v.is_finite() {
            return Some(format!("{v} is not finite"));
        }
        let fail = |op: &str, b: f64| Some(format!("{v} violates {op} {b}"));
        match *self {
            Bound { gt: Some(b), .. } if v <= b => fail(">", b),
            Bound { ge: Some(b), .. } if v < b => fail(">=", b),
            Bound { lt: Some(b), .. } if v >= b => fail("<", b),
            Bound { le: Some(b), .. } if v > b => fail("<=", b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentManifest {
    pub allowed: BTreeSet<String>,
    #[serde(default)]
    pub bounds: BTreeMap<String, BTreeMap<String, Bound>>,
}

impl ComponentManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: ComponentManifest = toml::from_str(text)
            .map_err(|e| FedError::Config(format!("component manifest: {e}")))?;
        if m.allowed.is_empty() {
            return Err(FedError::Config(
                "component manifest: empty allowlist".into(),
            ));
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

impl Default for ComponentManifest {
    fn default() -> Self {
        let allowed = [
            "fedavg",
            "coord-median",
            "geo-median",
            "fedavg-trust",
            "logreg-sgd",
            "clip",
            "dp-gaussian",
            "svt",
            "mask",
            "sim-transport",
            "tcp-transport",
        ]
        .into_iter()
        .map(String::from)
        .collect();

        let mut bounds: BTreeMap<String, BTreeMap<String, Bound>> = BTreeMap::new();
        let mut bound = |kind: &str, param: &str, b: Bound| {
            bounds
                .entry(kind.to_string())
                .or_default()
                .insert(param.to_string(), b);
        };
        bound("logreg-sgd", "learning_rate", Bound::positive());
        bound(
            "logreg-sgd",
            "local_epochs",
            Bound {
                ge: Some(1.0),
                ..Bound::default()
            },
        );
        bound(
            "logreg-sgd",
            "batch_size",
            Bound {
                ge: Some(1.0),
                ..Bound::default()
            },
        );
        bound(
            "logreg-sgd",
            "fedprox_mu",
            Bound {
                ge: Some(0.0),
                ..Bound::default()
            },
        );
        bound("clip", "clip_norm", Bound::positive());
        bound("dp-gaussian", "epsilon", Bound::positive());
        bound("dp-gaussian", "delta", Bound::unit_open());
        bound(
            "svt",
            "threshold_fraction",
            Bound {
                gt: Some(0.0),
                le: Some(1.0),
                ..Bound::default()
            },
        );
        bound(
            "svt",
            "budget_c",
            Bound {
                ge: Some(1.0),
                ..Bound::default()
            },
        );
        bound("svt", "epsilon", Bound::positive());
        bound("fedavg", "normalize_to", Bound::positive());
        bound("coord-median", "normalize_to", Bound::positive());
        bound("geo-median", "normalize_to", Bound::positive());
        bound("geo-median", "geo_tol", Bound::positive());
        bound(
            "geo-median",
            "geo_max_iter",
            Bound {
                ge: Some(1.0),
                ..Bound::default()
            },
        );
        bound("fedavg-trust", "normalize_to", Bound::positive());
        bound(
            "sim-transport",
            "drop_prob",
            Bound {
                ge: Some(0.0),
                lt: Some(1.0),
                ..Bound::default()
            },
        );
        ComponentManifest { allowed, bounds }
    }
}

/// One component a job wants to run, e.g. the aggregator or a site's DP filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobComponent {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl JobComponent {
    pub fn new(name: impl Into<String>, kind: impl Into<String>) -> Self {
        JobComponent {
            name: name.into(),
            kind: kind.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

/// Returns the first violation; the job must not start if this fails.
pub fn check_components(components: &[JobComponent], manifest: &ComponentManifest) -> Result<()> {
    for c in components {
        let unsafe_component = |reason: String| FedError::UnsafeComponent {
            name: c.name.clone(),
            reason,
        };
        if !manifest.allowed.contains(&c.kind) {
            return Err(unsafe_component(format!(
                "kind `{}` is not allowlisted",
                c.kind
            )));
        }
        let Some(bounds) = manifest.bounds.get(&c.kind) else {
            continue;
        };
        for (param, value) in &c.params {
            if let Some(why) = bounds.get(param).and_then(|b| b.check(*value)) {
                return Err(unsafe_component(format!("{param}: {why}")));
            }
        }
    }
    Ok(())
}
