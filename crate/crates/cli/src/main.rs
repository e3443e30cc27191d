//! `fedmesh` command-line front end.
//!
//! Exit codes: 0 ok, 1 validation or verification failure, 2 runtime failure.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fedmesh_core::config::{site_ids, ExperimentConfig};
use fedmesh_core::data::{load_conll, partition, PartitionPlan, TaggedCorpus};
use fedmesh_core::experiment::{federation_spec, run_experiment_with, vet, with_seeds};
use fedmesh_core::model::TaggedSentence;
use fedmesh_core::protocol::tcp_run::{run_client, serve, ServeOptions};
use fedmesh_core::protocol::{pooled_counts, Site};
use fedmesh_core::report::{parse_rows, render_tables, Report, RunRow};
use fedmesh_core::transport::tcp::bind_address;
use fedmesh_core::trustops::{
    audit_verify, load_audit, model_digest, provision, AuditEventType, AuditLog, Role, RosterSpec,
    StartupKit, SystemClock,
};
use fedmesh_core::FedError;

// stdout may be a closed pipe (`fedmesh ... | head`); that is not an error.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "fedmesh",
    version,
    about = "Federated NER training over simulated or TCP networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate startup kits for every site in a roster.
    Provision {
        #[arg(long)]
        roster: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Derive keys deterministically. For tests only.
        #[arg(long)]
        key_seed: Option<u64>,
    },
    /// Run the aggregation server over TCP. Binds to $FEDMESH_BIND.
    Serve {
        #[arg(long)]
        kit: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one site over TCP.
    Client {
        #[arg(long)]
        kit: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Training shard; defaults to this site's share of the config corpus.
        #[arg(long)]
        shard: Option<PathBuf>,
        /// Held-out split for cross-site validation.
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Overrides the address stored in the kit.
        #[arg(long)]
        server: Option<String>,
    },
    /// Run the configured experiment matrix in-process under virtual time.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Split a CoNLL corpus into per-site shards.
    Partition {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "ratios")]
        clients: Option<usize>,
        /// Percentages, e.g. `75,25`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<u32>>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Render tables from a `report.rows` file.
    Report {
        rows: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an audit log's hash chain.
    AuditVerify { log: PathBuf },
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_model: Option<u64>,
    #[arg(long)]
    seed_net: Option<u64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<FedError> for Failure {
    fn from(e: FedError) -> Self {
        let code = match e {
            FedError::Config(_)
            | FedError::Parse { .. }
            | FedError::UnsafeComponent { .. }
            | FedError::Auth(_)
            | FedError::DuplicateSite(_)
            | FedError::UnknownSite(_)
            | FedError::Partition { .. }
            | FedError::EmptyShard => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Provision {
            roster,
            out,
            key_seed,
        } => cmd_provision(&roster, &out, key_seed),
        Command::Serve { kit, config, out } => cmd_serve(&kit, &config, &out),
        Command::Client {
            kit,
            config,
            shard,
            heldout,
            server,
        } => cmd_client(&kit, &config, shard.as_deref(), heldout.as_deref(), server),
        Command::Simulate { config, seeds, out } => cmd_simulate(&config, &seeds, &out),
        Command::Partition {
            input,
            out,
            clients,
            ratios,
            seed,
        } => cmd_partition(&input, &out, clients, ratios, seed),
        Command::Report { rows, out } => cmd_report(&rows, out.as_deref()),
        Command::AuditVerify { log } => cmd_audit_verify(&log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fedmesh: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", dir.display()),
    })
}

fn write_audit(log: &AuditLog, path: &Path) -> CliResult {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    Ok(log.write_to(path)?)
}

/// Vets the job's components; a rejection is written to `<out>/audit/job.log`.
fn vet_or_log(cfg: &ExperimentConfig, out: &Path) -> CliResult {
    match vet(cfg) {
        Err(FedError::UnsafeComponent { name, reason }) => {
            let mut log = AuditLog::new(Arc::new(SystemClock));
            log.append(
                AuditEventType::ComponentRejected,
                &format!("component={name} reason={reason}"),
            );
            write_audit(&log, &out.join("audit").join("job.log"))?;
            Err(FedError::UnsafeComponent { name, reason }.into())
        }
        other => Ok(other?),
    }
}

fn cmd_provision(roster: &Path, out: &Path, key_seed: Option<u64>) -> CliResult {
    let text = std::fs::read_to_string(roster).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", roster.display()),
    })?;
    let spec = RosterSpec::parse(&text)?;
    let kits = provision(&spec, key_seed)?;
    for kit in &kits {
        kit.write(out)?;
        outln!("{}\t{}", kit.site_id, out.join(&kit.site_id).display());
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(config: &Path, seeds: &SeedArgs, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let cfg = with_seeds(&cfg, seeds.seed_data, seeds.seed_model, seeds.seed_net);
    cfg.check_files()?;
    vet_or_log(&cfg, out)?;
    let audit_dir = out.join("audit");
    create_dir(&audit_dir)?;
    let report = run_experiment_with(&cfg, |row, outcome| {
        outcome
            .audit
            .write_to(&audit_dir.join(format!("{}.log", row.label)))
    })?;
    report.write(out)?;
    out!("{}", render_tables(&report.rows));
    outln!("wrote {}", out.display());
    Ok(())
}

fn site_index(cfg: &ExperimentConfig, site_id: &str) -> Result<usize, Failure> {
    site_ids(cfg.federation.clients)
        .iter()
        .position(|s| s == site_id)
        .ok_or_else(|| FedError::UnknownSite(site_id.to_string()).into())
}

fn cmd_serve(kit: &Path, config: &Path, out: &Path) -> CliResult {
    let kit = StartupKit::load(kit)?;
    if kit.role != Role::Server {
        return Err(Failure::invalid(format!(
            "kit `{}` is not a server kit",
            kit.site_id
        )));
    }
    let cfg = load_config(config)?;
    vet_or_log(&cfg, out)?;
    let n = cfg.federation.clients;
    let ids = site_ids(n);
    let policies = cfg.policies(&ids)?;
    let masked = policies.iter().any(|p| p.masking_enabled);
    let sites: Vec<Site> = policies
        .into_iter()
        .map(|policy| Site {
            policy,
            ..Site::new("", Vec::new(), Vec::new())
        })
        .map(|mut s| {
            s.id = s.policy.site_id.clone();
            s
        })
        .collect();
    let spec = federation_spec(&cfg, n, cfg.strategy.clone(), masked);
    let addr = bind_address();
    let listener = TcpListener::bind(&addr).map_err(|e| Failure {
        code: 2,
        message: format!("bind {addr}: {e}"),
    })?;
    eprintln!(
        "fedmesh: listening on {}",
        listener.local_addr().map(|a| a.to_string()).unwrap_or(addr)
    );
    let opts = ServeOptions {
        expected_clients: n,
        ..ServeOptions::default()
    };
    let outcome = serve(listener, kit, &spec, &sites, &opts)?;

    create_dir(out)?;
    write_audit(&outcome.audit, &out.join("audit.log"))?;
    let counts = pooled_counts(&outcome.evals);
    let row = RunRow {
        group: "single".into(),
        label: format!("tcp-clients-{n}"),
        clients: n,
        ratios: if cfg.partition.ratios.is_empty() {
            "-".into()
        } else {
            cfg.partition
                .ratios
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join("/")
        },
        strategy: cfg.strategy.kind.as_str().into(),
        rounds: cfg.federation.rounds,
        byzantine: 0,
        seeds: cfg.seeds,
        entity: counts.entity_metrics(),
        token: counts.token_metrics(),
        aborted_rounds: outcome.history.iter().filter(|r| r.aborted).count(),
        model_digest: hex_digest(&outcome.global),
    };
    let mut report = Report::new(cfg.to_toml());
    report.push_run(row, outcome.history, outcome.evals);
    report.write(out)?;
    out!("{}", render_tables(&report.rows));
    Ok(())
}

fn hex_digest(params: &fedmesh_core::model::ParameterVector) -> String {
    model_digest(params)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn cmd_client(
    kit: &Path,
    config: &Path,
    shard: Option<&Path>,
    heldout: Option<&Path>,
    server: Option<String>,
) -> CliResult {
    let kit = StartupKit::load(kit)?;
    if kit.role != Role::Client {
        return Err(Failure::invalid(format!(
            "kit `{}` is not a client kit",
            kit.site_id
        )));
    }
    let cfg = load_config(config)?;
    let n = cfg.federation.clients;
    let idx = site_index(&cfg, &kit.site_id)?;
    let load = |p: &Path| -> Result<Vec<TaggedSentence>, Failure> { Ok(load_conll(p)?.sentences) };
    let train = match shard {
        Some(p) => load(p)?,
        None => {
            let corpus = load_conll(cfg.resolve(&cfg.corpus.train))?;
            partition(&corpus, &cfg.partition_plan())?.swap_remove(idx)
        }
    };
    let held = match heldout {
        Some(p) => load(p)?,
        None => {
            let corpus = load_conll(cfg.resolve(&cfg.corpus.test))?;
            partition(&corpus, &PartitionPlan::equal(n, cfg.seeds.data))?.swap_remove(idx)
        }
    };
    let ids = site_ids(n);
    let policies = cfg.policies(&ids)?;
    let masked = policies.iter().any(|p| p.masking_enabled);
    let mut site = Site::new(kit.site_id.clone(), train, held);
    site.policy = policies[idx].clone();
    let spec = federation_spec(&cfg, n, cfg.strategy.clone(), masked);
    let addr = server.unwrap_or_else(|| kit.server_addr.clone());
    let report = run_client(
        kit,
        site,
        spec,
        &addr,
        cfg.transport.retry,
        Duration::from_secs(30),
    )?;
    outln!(
        "uploads={} evaluated={} rejections={}",
        report.uploads,
        report.evaluated,
        report.rejections.len()
    );
    for r in &report.rejections {
        outln!("rejected: {r}");
    }
    Ok(())
}

fn cmd_partition(
    input: &Path,
    out: &Path,
    clients: Option<usize>,
    ratios: Option<Vec<u32>>,
    seed: u64,
) -> CliResult {
    let plan = match (clients, ratios) {
        (_, Some(r)) => PartitionPlan::ratio(r, seed),
        (Some(n), None) => PartitionPlan::equal(n, seed),
        (None, None) => return Err(Failure::invalid("pass --clients or --ratios")),
    };
    plan.validate()?;
    let corpus = load_conll(input)?;
    let shards = partition(&corpus, &plan)?;
    create_dir(out)?;
    for (id, shard) in site_ids(shards.len()).iter().zip(shards) {
        let path = out.join(format!("{id}.conll"));
        let shard = TaggedCorpus::new(shard, path.display().to_string());
        std::fs::write(&path, shard.to_conll()).map_err(|e| Failure {
            code: 2,
            message: format!("{}: {e}", path.display()),
        })?;
        let stats = shard.stats();
        outln!(
            "{id}\tsentences={}\ttokens={}\tentities={}",
            stats.sentences,
            stats.tokens,
            stats.entities
        );
    }
    Ok(())
}

fn cmd_report(rows: &Path, out: Option<&Path>) -> CliResult {
    let text = std::fs::read_to_string(rows).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", rows.display()),
    })?;
    let tables = render_tables(&parse_rows(&text)?);
    match out {
        Some(p) => std::fs::write(p, tables).map_err(|e| Failure {
            code: 2,
            message: format!("{}: {e}", p.display()),
        }),
        None => {
            out!("{tables}");
            Ok(())
        }
    }
}

fn cmd_audit_verify(log: &Path) -> CliResult {
    let entries = match load_audit(log) {
        Ok(e) => e,
        Err(FedError::Io { path, source }) => {
            return Err(Failure {
                code: 2,
                message: format!("{}: {source}", path.display()),
            })
        }
        Err(e) => return Err(Failure::invalid(format!("malformed audit log: {e}"))),
    };
    match audit_verify(&entries) {
        Ok(()) => {
            outln!("ok: {} entries", entries.len());
            Ok(())
        }
        Err(seq) => {
            outln!("first bad seq: {seq}");
            Err(Failure::invalid(format!("audit chain broken at seq {seq}")))
        }
    }
}
