//! Experiment configuration (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file. Every section except `[corpus]` has defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationStrategy, StrategyKind};
use crate::data::{PartitionMode, PartitionPlan};
use crate::error::{FedError, Result};
use crate::model::TrainConfig;
use crate::privacy::SitePolicy;
use crate::transport::{PartitionWindow, RetryPolicy, SimNetConfig};
use crate::trustops::JobComponent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: u64,
    pub clients: usize,
    /// Clients invited per round; defaults to all of them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invite: Option<usize>,
    /// Minimum responses; defaults to `invite`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quorum: Option<usize>,
    pub deadline_ms: u64,
    pub abort_retry: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            rounds: 20,
            clients: 2,
            invite: None,
            quorum: None,
            deadline_ms: 5000,
            abort_retry: true,
        }
    }
}

impl FederationSection {
    /// `(k, m)` for a federation of `n` clients. Explicit values are capped
    /// at `n` so matrix rows with fewer clients stay valid.
    pub fn invite_quorum(&self, n: usize) -> (usize, usize) {
        let k = self.invite.unwrap_or(n).min(n);
        let m = self.quorum.unwrap_or(k).min(k);
        (k, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub mode: PartitionMode,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ratios: Vec<u32>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            mode: PartitionMode::EqualN,
            ratios: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Sim,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub kind: TransportKind,
    pub server_addr: String,
    pub latency_ms: (u64, u64),
    pub drop_prob: f64,
    pub retry: RetryPolicy,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub partitions: Vec<PartitionWindow>,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            kind: TransportKind::Sim,
            server_addr: "127.0.0.1:7761".into(),
            latency_ms: (1, 10),
            drop_prob: 0.0,
            retry: RetryPolicy::default(),
            partitions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub net: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            model: 2,
            net: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    /// Directory of `<site_id>.toml` policies; sites without a file run open.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    pub byzantine: usize,
    pub norm: f64,
    pub strategies: Vec<StrategyKind>,
}

impl Default for AdversarySection {
    fn default() -> Self {
        Self {
            byzantine: 1,
            norm: 1e6,
            strategies: vec![
                StrategyKind::Fedavg,
                StrategyKind::CoordMedian,
                StrategyKind::GeoMedian,
            ],
        }
    }
}

/// Which configurations `simulate` runs. With nothing set it runs the single
/// federation described by `[federation]` and `[partition]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub client_counts: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ratios: Vec<Vec<u32>>,
    pub centralized: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversary: Option<AdversarySection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobSection {
    /// Extra components to vet alongside the ones implied by the config.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<JobComponent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusPaths,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub strategy: AggregationStrategy,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub job: JobSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn field_err(path: &str, msg: impl std::fmt::Display) -> FedError {
    FedError::Config(format!("{path}: {msg}"))
}

fn check_ratios(path: &str, ratios: &[u32]) -> Result<()> {
    if ratios.is_empty() || ratios.contains(&0) || ratios.iter().sum::<u32>() != 100 {
        return Err(field_err(path, "ratios must be positive and sum to 100"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FedError::Config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Schema-level checks. File existence is checked separately by
    /// [`ExperimentConfig::check_files`].
    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if f.clients == 0 {
            return Err(field_err("federation.clients", "must be positive"));
        }
        if let Some(k) = f.invite {
            if k == 0 || k > f.clients {
                return Err(field_err(
                    "federation.invite",
                    "must be in 1..=federation.clients",
                ));
            }
        }
        if let Some(m) = f.quorum {
            if m == 0 || m > f.invite.unwrap_or(f.clients) {
                return Err(field_err(
                    "federation.quorum",
                    "must be in 1..=federation.invite",
                ));
            }
        }
        if self.partition.mode == PartitionMode::Ratio {
            check_ratios("partition.ratios", &self.partition.ratios)?;
            if self.partition.ratios.len() != f.clients {
                return Err(field_err(
                    "partition.ratios",
                    "needs one entry per client (federation.clients)",
                ));
            }
        }
        self.train.validate().map_err(|e| field_err("train", e))?;
        self.strategy
            .validate()
            .map_err(|e| field_err("strategy", e))?;
        self.sim_config(0)
            .validate()
            .map_err(|e| field_err("transport", e))?;
        for (i, r) in self.experiment.ratios.iter().enumerate() {
            check_ratios(&format!("experiment.ratios[{i}]"), r)?;
        }
        if self.experiment.client_counts.contains(&0) {
            return Err(field_err(
                "experiment.client_counts",
                "entries must be positive",
            ));
        }
        if let Some(a) = &self.experiment.adversary {
            if a.byzantine >= f.clients {
                return Err(field_err(
                    "experiment.adversary.byzantine",
                    "must leave at least one honest client",
                ));
            }
            if !(a.norm.is_finite() && a.norm > 0.0) {
                return Err(field_err("experiment.adversary.norm", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        let mut paths = vec![
            ("corpus.train", &self.corpus.train),
            ("corpus.test", &self.corpus.test),
        ];
        if let Some(dev) = &self.corpus.dev {
            paths.push(("corpus.dev", dev));
        }
        if let Some(dir) = &self.privacy.policy_dir {
            paths.push(("privacy.policy_dir", dir));
        }
        for (field, p) in paths {
            let full = self.resolve(p);
            if !full.exists() {
                return Err(field_err(
                    field,
                    format!("{} does not exist", full.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        match self.partition.mode {
            PartitionMode::EqualN => PartitionPlan::equal(self.federation.clients, self.seeds.data),
            PartitionMode::Ratio => {
                PartitionPlan::ratio(self.partition.ratios.clone(), self.seeds.data)
            }
        }
    }

    pub fn sim_config(&self, seed: u64) -> SimNetConfig {
        SimNetConfig {
            latency_ms: self.transport.latency_ms,
            drop_prob: self.transport.drop_prob,
            seed,
            partitions: self.transport.partitions.clone(),
            retry: self.transport.retry,
        }
    }

    /// Policies for `site_ids`, loaded from `privacy.policy_dir` when set.
    pub fn policies(&self, site_ids: &[String]) -> Result<Vec<SitePolicy>> {
        site_ids
            .iter()
            .map(|id| {
                let Some(dir) = &self.privacy.policy_dir else {
                    return Ok(SitePolicy::open(id.clone()));
                };
                let path = self.resolve(dir).join(format!("{id}.toml"));
                if !path.exists() {
                    return Ok(SitePolicy::open(id.clone()));
                }
                let policy = SitePolicy::load(&path)?;
                if policy.site_id != *id {
                    return Err(field_err(
                        "privacy.policy_dir",
                        format!("{} declares site `{}`", path.display(), policy.site_id),
                    ));
                }
                Ok(policy)
            })
            .collect()
    }

    /// Every component this job would run, for vetting before any round.
    pub fn components(&self, policies: &[SitePolicy]) -> Vec<JobComponent> {
        let s = &self.strategy;
        let mut strategy = JobComponent::new("strategy", s.kind.as_str());
        if let Some(n) = s.normalize_to {
            strategy = strategy.param("normalize_to", n);
        }
        if s.kind == StrategyKind::GeoMedian {
            strategy = strategy
                .param("geo_tol", s.geo_tol)
                .param("geo_max_iter", f64::from(s.geo_max_iter));
        }
        let t = &self.train;
        let trainer = JobComponent::new("trainer", "logreg-sgd")
            .param("learning_rate", t.learning_rate)
            .param("local_epochs", f64::from(t.local_epochs))
            .param("batch_size", t.batch_size as f64)
            .param("fedprox_mu", t.fedprox_mu);
        let transport = match self.transport.kind {
            TransportKind::Sim => JobComponent::new("transport", "sim-transport")
                .param("drop_prob", self.transport.drop_prob),
            TransportKind::Tcp => JobComponent::new("transport", "tcp-transport"),
        };
        let mut out = vec![strategy, trainer, transport];
        if let Some(a) = &self.experiment.adversary {
            out.extend(
                a.strategies
                    .iter()
                    .map(|k| JobComponent::new("adversary-strategy", k.as_str())),
            );
        }
        for p in policies {
            if let Some(c) = p.clip_norm {
                out.push(
                    JobComponent::new(format!("{}/clip", p.site_id), "clip").param("clip_norm", c),
                );
            }
            if let Some(dp) = p.dp {
                out.push(
                    JobComponent::new(format!("{}/dp", p.site_id), "dp-gaussian")
                        .param("epsilon", dp.epsilon)
                        .param("delta", dp.delta),
                );
            }
            if let Some(svt) = p.svt {
                out.push(
                    JobComponent::new(format!("{}/svt", p.site_id), "svt")
                        .param("threshold_fraction", svt.threshold_fraction)
                        .param("budget_c", svt.budget_c as f64)
                        .param("epsilon", svt.epsilon),
                );
            }
            if p.masking_enabled {
                out.push(JobComponent::new(format!("{}/mask", p.site_id), "mask"));
            }
        }
        out.extend(self.job.components.iter().cloned());
        out
    }
}

/// Site ids `site-1 ..= site-n`.
pub fn site_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("site-{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[corpus]\ntrain = \"train.conll\"\ntest = \"test.conll\"\n";

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.federation.rounds, 20);
        assert_eq!(cfg.federation.invite_quorum(6), (6, 6));
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.experiment.client_counts = vec![2, 4, 6];
        cfg.experiment.ratios = vec![vec![50, 50], vec![90, 10]];
        cfg.experiment.adversary = Some(AdversarySection::default());
        cfg.federation.quorum = Some(1);
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let cfg =
            ExperimentConfig::parse(&format!("{MINIMAL}[federation]\nclients = 2\nquorum = 3\n"))
                .unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("federation.quorum"), "{msg}");

        let cfg = ExperimentConfig::parse(&format!(
            "{MINIMAL}[partition]\nmode = \"ratio\"\nratios = [60, 30]\n"
        ))
        .unwrap();
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("partition.ratios"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}[federation]\nrondus = 3\n")).is_err());
    }
}
