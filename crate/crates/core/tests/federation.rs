use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use fedmesh_core::aggregation::{AggregationStrategy, StrategyKind};
use fedmesh_core::data::synthetic_corpus;
use fedmesh_core::model::{loss_and_grad, ParameterVector, TaggedSentence, TrainConfig};
use fedmesh_core::protocol::tcp_run::{run_client, serve, ServeOptions};
use fedmesh_core::protocol::{replay_history, run_federation, sim_kits, FederationSpec, Site};
use fedmesh_core::seeding::derive_seed;
use fedmesh_core::transport::{RetryPolicy, SimNetConfig};
use fedmesh_core::trustops::{audit_verify, parse_audit};

fn spec(rounds: u64, n: usize, train: TrainConfig) -> FederationSpec {
    FederationSpec {
        rounds,
        invite: n,
        quorum: n,
        deadline_ms: 5000,
        strategy: AggregationStrategy::with_kind(StrategyKind::Fedavg),
        train,
        model_seed: 2,
        plan_seed: 3,
        abort_retry: true,
        masked: false,
        cohort_secret: 77,
    }
}

fn train(batch_size: usize) -> TrainConfig {
    TrainConfig {
        feature_dim: 1 << 10,
        learning_rate: 0.5,
        batch_size,
        ..TrainConfig::default()
    }
}

fn shards(sizes: &[usize], seed: u64) -> Vec<Vec<TaggedSentence>> {
    let mut all = synthetic_corpus(sizes.iter().sum(), seed)
        .sentences
        .into_iter();
    sizes
        .iter()
        .map(|&n| all.by_ref().take(n).collect())
        .collect()
}

fn sites(sizes: &[usize]) -> Vec<Site> {
    let held = shards(&vec![20; sizes.len()], 99);
    shards(sizes, 1)
        .into_iter()
        .zip(held)
        .enumerate()
        .map(|(i, (shard, heldout))| Site::new(format!("site-{}", i + 1), shard, heldout))
        .collect()
}

fn lossless() -> SimNetConfig {
    SimNetConfig {
        latency_ms: (0, 0),
        ..SimNetConfig::default()
    }
}

#[test]
fn same_inputs_same_run() {
    let run = || {
        let net = SimNetConfig {
            drop_prob: 0.2,
            seed: 5,
            ..SimNetConfig::default()
        };
        let mut s = spec(3, 4, train(8));
        s.invite = 3;
        s.quorum = 2;
        run_federation(&s, sites(&[30, 20, 25, 15]), net).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.global, b.global);
    assert_eq!(a.audit.to_text(), b.audit.to_text());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.history, b.history);
    assert!(a.history.iter().filter(|r| !r.aborted).count() >= 3);
}

#[test]
fn audit_log_verifies_and_replays_to_history() {
    let mut s = spec(4, 5, train(8));
    s.invite = 4;
    s.quorum = 3;
    let net = SimNetConfig {
        drop_prob: 0.3,
        seed: 11,
        ..SimNetConfig::default()
    };
    let out = run_federation(&s, sites(&[20; 5]), net).unwrap();
    let entries = parse_audit(&out.audit.to_text()).unwrap();
    assert_eq!(audit_verify(&entries), Ok(()));
    assert_eq!(replay_history(&entries).unwrap(), out.history);
}

/// Full-batch gradient descent on the pooled data, computed directly.
fn centralized_gd(
    pooled: &[TaggedSentence],
    cfg: &TrainConfig,
    rounds: usize,
) -> Vec<ParameterVector> {
    let mut w = cfg.zero_params();
    let mut traj = Vec::new();
    for _ in 0..rounds {
        let (_, g) = loss_and_grad(&w, pooled, cfg, None).unwrap();
        w.add_scaled(-cfg.learning_rate, &g);
        traj.push(w.clone());
    }
    traj
}

#[test]
fn one_full_batch_step_matches_centralized_gd() {
    let sizes = [40, 25, 15];
    let cfg = train(1000);
    let pooled: Vec<TaggedSentence> = shards(&sizes, 1).concat();
    let oracle = centralized_gd(&pooled, &cfg, 4);
    for (r, want) in oracle.iter().enumerate() {
        let out = run_federation(
            &spec(r as u64 + 1, 3, cfg.clone()),
            sites(&sizes),
            lossless(),
        )
        .unwrap();
        let diff = out.global.max_abs_diff(want);
        assert!(diff <= 1e-9, "round {}: {diff}", r + 1);
    }
}

#[test]
fn masked_rounds_match_plain_rounds() {
    let sizes = [30, 20, 10];
    let plain = run_federation(&spec(2, 3, train(8)), sites(&sizes), lossless()).unwrap();
    let mut s = spec(2, 3, train(8));
    s.masked = true;
    let masked = run_federation(&s, sites(&sizes), lossless()).unwrap();
    assert!(masked.history.iter().all(|r| !r.aborted));
    // Fixed-point encoding rounds each coordinate to 2^-32.
    assert!(masked.global.max_abs_diff(&plain.global) < 1e-8);
    assert_ne!(masked.global, plain.global);
}

#[test]
fn rounds_complete_under_loss() {
    for seed in 0..5 {
        let mut s = spec(2, 6, train(8));
        s.quorum = 4;
        let net = SimNetConfig {
            drop_prob: 0.3,
            seed,
            ..SimNetConfig::default()
        };
        let out = run_federation(&s, sites(&[10; 6]), net).unwrap();
        assert_eq!(
            out.history.iter().filter(|r| !r.aborted).count(),
            2,
            "seed {seed}"
        );
    }
}

#[test]
fn tcp_matches_simulation() {
    let sizes = [20, 15, 10];
    let s = spec(2, 3, train(8));
    let sim = run_federation(&s, sites(&sizes), lossless()).unwrap();

    let ids: Vec<String> = (1..=3).map(|i| format!("site-{i}")).collect();
    let kits = sim_kits(
        &ids,
        derive_seed("fedmesh/keys", &[&s.model_seed.to_le_bytes()]),
    )
    .unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server_kit = kits[0].clone();
    let server_sites = sites(&sizes);
    let server_spec = s.clone();
    let server = thread::spawn(move || {
        let opts = ServeOptions {
            expected_clients: 3,
            registration_timeout: Duration::from_secs(30),
            eval_timeout: Duration::from_secs(30),
        };
        serve(listener, server_kit, &server_spec, &server_sites, &opts)
    });
    let clients: Vec<_> = sites(&sizes)
        .into_iter()
        .zip(kits[1..].iter().cloned())
        .map(|(site, kit)| {
            let (spec, addr) = (s.clone(), addr.clone());
            thread::spawn(move || {
                run_client(
                    kit,
                    site,
                    spec,
                    &addr,
                    RetryPolicy::default(),
                    Duration::from_secs(10),
                )
            })
        })
        .collect();
    let tcp = server.join().unwrap().unwrap();
    for c in clients {
        let report = c.join().unwrap().unwrap();
        assert_eq!(report.uploads, 2);
        assert!(report.evaluated);
    }
    assert_eq!(tcp.global, sim.global);
    assert_eq!(tcp.evals, sim.evals);
    let entries = parse_audit(&tcp.audit.to_text()).unwrap();
    assert_eq!(audit_verify(&entries), Ok(()));
}
