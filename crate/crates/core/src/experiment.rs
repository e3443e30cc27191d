//! Experiment matrices: federations over several partitions, a centralized
//! baseline and a Byzantine-robustness comparison.

use std::time::Instant;

use crate::aggregation::{AggregationStrategy, StrategyKind};
use crate::config::{site_ids, ExperimentConfig, Seeds};
use crate::data::{load_conll, partition, PartitionPlan, TaggedCorpus};
use crate::error::Result;
use crate::model::{evaluate, local_train, ParameterVector, TrainConfig};
use crate::protocol::{run_federation, Behavior, FederationOutcome, FederationSpec, Site};
use crate::report::{Report, RunRow};
use crate::seeding::derive_seed;
use crate::trustops::{check_components, model_digest, ComponentManifest};

/// One configuration of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub group: String,
    pub label: String,
    pub plan: PartitionPlan,
    pub strategy: AggregationStrategy,
    pub byzantine: usize,
}

impl RunSpec {
    fn ratios_label(&self) -> String {
        if self.plan.ratios.is_empty() {
            "-".into()
        } else {
            self.plan
                .ratios
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join("/")
        }
    }
}

pub struct Corpora {
    pub train: TaggedCorpus,
    pub test: TaggedCorpus,
}

pub fn load_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    Ok(Corpora {
        train: load_conll(cfg.resolve(&cfg.corpus.train))?,
        test: load_conll(cfg.resolve(&cfg.corpus.test))?,
    })
}

/// The runs `simulate` performs for this config, in report order.
pub fn matrix(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let seed = cfg.seeds.data;
    let ex = &cfg.experiment;
    let mut runs = Vec::new();
    for &n in &ex.client_counts {
        runs.push(RunSpec {
            group: "clients".into(),
            label: format!("clients-{n}"),
            plan: PartitionPlan::equal(n, seed),
            strategy: cfg.strategy.clone(),
            byzantine: 0,
        });
    }
    for r in &ex.ratios {
        runs.push(RunSpec {
            group: "imbalance".into(),
            label: format!(
                "ratio-{}",
                r.iter().map(u32::to_string).collect::<Vec<_>>().join("-")
            ),
            plan: PartitionPlan::ratio(r.clone(), seed),
            strategy: cfg.strategy.clone(),
            byzantine: 0,
        });
    }
    if let Some(adv) = &ex.adversary {
        let n = cfg.federation.clients;
        for &kind in &adv.strategies {
            let strategy = AggregationStrategy {
                kind,
                ..cfg.strategy.clone()
            };
            for (group, byzantine) in [("robust-clean", 0), ("robust-byzantine", adv.byzantine)] {
                runs.push(RunSpec {
                    group: group.into(),
                    label: format!("{group}-{}", kind.as_str()),
                    plan: PartitionPlan::equal(n, seed),
                    strategy: strategy.clone(),
                    byzantine,
                });
            }
        }
    }
    if runs.is_empty() {
        runs.push(RunSpec {
            group: "single".into(),
            label: format!("clients-{}", cfg.federation.clients),
            plan: cfg.partition_plan(),
            strategy: cfg.strategy.clone(),
            byzantine: 0,
        });
    }
    runs
}

/// Training settings with the model seed applied.
pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.seeds.model,
        ..cfg.train.clone()
    }
}

pub fn federation_spec(
    cfg: &ExperimentConfig,
    n: usize,
    strategy: AggregationStrategy,
    masked: bool,
) -> FederationSpec {
    let (invite, quorum) = cfg.federation.invite_quorum(n);
    FederationSpec {
        rounds: cfg.federation.rounds,
        invite,
        quorum,
        deadline_ms: cfg.federation.deadline_ms,
        strategy,
        train: train_config(cfg),
        model_seed: cfg.seeds.model,
        plan_seed: cfg.seeds.net,
        abort_retry: cfg.federation.abort_retry,
        masked,
        cohort_secret: derive_seed("fedmesh/cohort", &[&cfg.seeds.model.to_le_bytes()]),
    }
}

/// Shards the training corpus by `plan` and the test corpus evenly, one
/// held-out split per site. The first `byzantine` sites misbehave.
pub fn build_sites(
    cfg: &ExperimentConfig,
    corpora: &Corpora,
    plan: &PartitionPlan,
    byzantine: usize,
    byzantine_norm: f64,
) -> Result<Vec<Site>> {
    let shards = partition(&corpora.train, plan)?;
    let n = shards.len();
    let ids = site_ids(n);
    let heldout = partition(&corpora.test, &PartitionPlan::equal(n, cfg.seeds.data))?;
    let policies = cfg.policies(&ids)?;
    Ok(shards
        .into_iter()
        .zip(heldout)
        .zip(policies)
        .enumerate()
        .map(|(i, ((shard, held), policy))| Site {
            id: ids[i].clone(),
            shard,
            heldout: held,
            policy,
            behavior: if i < byzantine {
                Behavior::Byzantine {
                    norm: byzantine_norm,
                }
            } else {
                Behavior::Honest
            },
        })
        .collect())
}

/// Vets every component the config implies against the default manifest.
pub fn vet(cfg: &ExperimentConfig) -> Result<()> {
    let widest = matrix(cfg)
        .iter()
        .map(|r| r.plan.n_clients)
        .max()
        .unwrap_or(cfg.federation.clients);
    let policies = cfg.policies(&site_ids(widest.max(cfg.federation.clients)))?;
    check_components(&cfg.components(&policies), &ComponentManifest::default())
}

pub fn run_one(
    cfg: &ExperimentConfig,
    corpora: &Corpora,
    run: &RunSpec,
) -> Result<(RunRow, FederationOutcome)> {
    let norm = cfg.experiment.adversary.as_ref().map_or(1e6, |a| a.norm);
    let sites = build_sites(cfg, corpora, &run.plan, run.byzantine, norm)?;
    let n = sites.len();
    let masked = sites.iter().any(|s| s.policy.masking_enabled);
    let spec = federation_spec(cfg, n, run.strategy.clone(), masked);
    let outcome = run_federation(&spec, sites, cfg.sim_config(cfg.seeds.net))?;
    let row = row_for(
        cfg,
        run,
        n,
        &outcome.global,
        &corpora.test,
        outcome.history.iter().filter(|r| r.aborted).count(),
    );
    Ok((row, outcome))
}

fn row_for(
    cfg: &ExperimentConfig,
    run: &RunSpec,
    clients: usize,
    params: &ParameterVector,
    test: &TaggedCorpus,
    aborted_rounds: usize,
) -> RunRow {
    let (entity, token) = evaluate(params, &test.sentences, &cfg.train);
    RunRow {
        group: run.group.clone(),
        label: run.label.clone(),
        clients,
        ratios: run.ratios_label(),
        strategy: run.strategy.kind.as_str().to_string(),
        rounds: cfg.federation.rounds,
        byzantine: run.byzantine,
        seeds: cfg.seeds,
        entity,
        token,
        aborted_rounds,
        model_digest: hex::encode(model_digest(params)),
    }
}

/// Pools every training sentence and runs `rounds * local_epochs` epochs.
pub fn centralized_baseline(
    cfg: &ExperimentConfig,
    corpora: &Corpora,
) -> Result<(RunRow, ParameterVector)> {
    let mut tc = train_config(cfg);
    tc.local_epochs *= (cfg.federation.rounds as u32).max(1);
    let start = tc.zero_params();
    let params = if cfg.federation.rounds == 0 {
        start
    } else {
        local_train(&start, &corpora.train.sentences, &tc, None)?.0
    };
    let run = RunSpec {
        group: "centralized".into(),
        label: "centralized".into(),
        plan: PartitionPlan::equal(1, cfg.seeds.data),
        strategy: AggregationStrategy::with_kind(StrategyKind::Fedavg),
        byzantine: 0,
    };
    let mut row = row_for(cfg, &run, 1, &params, &corpora.test, 0);
    row.strategy = "pooled".into();
    Ok((row, params))
}

/// Runs the whole matrix in-process under virtual time.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    run_experiment_with(cfg, |_, _| Ok(()))
}

/// [`run_experiment`], handing each federated run to `on_run` as it finishes.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mut on_run: impl FnMut(&RunRow, &FederationOutcome) -> Result<()>,
) -> Result<Report> {
    let started = Instant::now();
    cfg.validate()?;
    cfg.check_files()?;
    vet(cfg)?;
    let corpora = load_corpora(cfg)?;
    let mut report = Report::new(cfg.to_toml());
    for run in matrix(cfg) {
        let (row, outcome) = run_one(cfg, &corpora, &run)?;
        on_run(&row, &outcome)?;
        report.push_run(row, outcome.history, outcome.evals);
    }
    if cfg.experiment.centralized {
        let (row, _) = centralized_baseline(cfg, &corpora)?;
        report.push_run(row, Vec::new(), Vec::new());
    }
    report.runtime = started.elapsed();
    Ok(report)
}

/// Seeds with any CLI overrides applied.
pub fn with_seeds(
    cfg: &ExperimentConfig,
    data: Option<u64>,
    model: Option<u64>,
    net: Option<u64>,
) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    cfg.seeds = Seeds {
        data: data.unwrap_or(cfg.seeds.data),
        model: model.unwrap_or(cfg.seeds.model),
        net: net.unwrap_or(cfg.seeds.net),
    };
    cfg
}
