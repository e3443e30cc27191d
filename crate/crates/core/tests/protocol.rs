use std::collections::{BTreeMap, BTreeSet};

use fedmesh_core::model::ParameterVector;
use fedmesh_core::privacy::RingVector;
use fedmesh_core::protocol::{
    client_step, register_digest, server_step, ClientAction, ClientEvent, ClientPhase, ClientState,
    RoundPlan, ServerAction, ServerEvent, ServerPhase, ServerState, SignedUpdate, SubmittedUpdate,
    Task, UpdateBody,
};
use fedmesh_core::trustops::{provision, sign_model, AuditEventType, RosterSpec, StartupKit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: usize = 4;

fn kits(n: usize) -> Vec<StartupKit> {
    let spec = RosterSpec {
        server_addr: "127.0.0.1:0".into(),
        sites: (1..=n).map(|i| format!("site-{i}")).collect(),
        admins: vec![],
    };
    provision(&spec, Some(99)).unwrap()
}

fn kit<'a>(kits: &'a [StartupKit], id: &str) -> &'a StartupKit {
    kits.iter().find(|k| k.site_id == id).unwrap()
}

fn signed(kit: &StartupKit, round: u64, weight: f64, body: UpdateBody) -> SignedUpdate {
    let update = SubmittedUpdate {
        client_id: kit.site_id.clone(),
        round,
        weight,
        body,
    };
    let signature = kit.sign_digest(&update.digest());
    SignedUpdate { update, signature }
}

fn plain(v: f64) -> UpdateBody {
    UpdateBody::Plain(ParameterVector::from_vec(vec![v; DIMS]).unwrap())
}

fn nan_body() -> UpdateBody {
    let mut v = ParameterVector::zeros(DIMS);
    v.as_mut_slice()[1] = f64::NAN;
    UpdateBody::Plain(v)
}

fn step(state: ServerState, event: ServerEvent) -> (ServerState, Vec<ServerAction>) {
    server_step(state, event)
}

fn audits(actions: &[ServerAction]) -> Vec<AuditEventType> {
    actions
        .iter()
        .filter_map(|a| match a {
            ServerAction::Audit { event, .. } => Some(*event),
            _ => None,
        })
        .collect()
}

fn registered_server(kits: &[StartupKit]) -> ServerState {
    let mut state = ServerState::new(
        ParameterVector::zeros(DIMS),
        kits[0].roster.clone(),
        "fedavg",
    );
    for k in kits.iter().filter(|k| k.site_id != "server") {
        let nonce = b"n".to_vec();
        let signature = k.sign_digest(&register_digest(&k.site_id, &nonce));
        state = step(
            state,
            ServerEvent::ClientRegistered {
                site_id: k.site_id.clone(),
                nonce,
                signature,
            },
        )
        .0;
    }
    state
}

fn plan(round: u64, invited: &[&str], m: usize, masked: bool) -> RoundPlan {
    RoundPlan {
        round,
        invited: invited.iter().map(|s| s.to_string()).collect(),
        min_responses: m,
        deadline_ms: 1000,
        masked,
    }
}

fn gathering(kits: &[StartupKit], p: RoundPlan) -> ServerState {
    let round = p.round;
    let state = registered_server(kits);
    let (state, _) = step(state, ServerEvent::Start { plan: p, at_ms: 0 });
    let (state, actions) = step(state, ServerEvent::TasksDispatched { round });
    assert!(matches!(
        actions[..],
        [ServerAction::ArmDeadline { after_ms: 1000, .. }]
    ));
    state
}

#[test]
fn registration_requires_roster_signature() {
    let ks = kits(2);
    let state = ServerState::new(ParameterVector::zeros(DIMS), ks[0].roster.clone(), "fedavg");
    let forged = kit(&ks, "site-2").sign_digest(&register_digest("site-1", b"x"));
    let (state, actions) = step(
        state,
        ServerEvent::ClientRegistered {
            site_id: "site-1".into(),
            nonce: b"x".to_vec(),
            signature: forged,
        },
    );
    assert!(
        matches!(&actions[1], ServerAction::RefuseRegistration { reason, .. } if reason == "bad signature")
    );
    let (state, actions) = step(
        state,
        ServerEvent::ClientRegistered {
            site_id: "mallory".into(),
            nonce: vec![],
            signature: vec![0; 64],
        },
    );
    assert!(
        matches!(&actions[1], ServerAction::RefuseRegistration { reason, .. } if reason == "unknown site")
    );
    let server_sig = kit(&ks, "server").sign_digest(&register_digest("server", b"x"));
    let (state, actions) = step(
        state,
        ServerEvent::ClientRegistered {
            site_id: "server".into(),
            nonce: b"x".to_vec(),
            signature: server_sig,
        },
    );
    assert!(matches!(
        &actions[1],
        ServerAction::RefuseRegistration { .. }
    ));
    assert!(state.registered().is_empty());
}

#[test]
fn full_round_aggregates_when_all_invited_answer() {
    let ks = kits(3);
    let mut state = gathering(&ks, plan(0, &["site-1", "site-2", "site-3"], 2, false));
    let mut last = Vec::new();
    for id in ["site-3", "site-1", "site-2"] {
        let (s, a) = step(
            state,
            ServerEvent::UpdateReceived(signed(kit(&ks, id), 0, 1.0, plain(1.0))),
        );
        state = s;
        last = a;
    }
    match &last[1] {
        ServerAction::Aggregate {
            updates,
            masked: false,
            ..
        } => {
            let ids: Vec<&str> = updates.iter().map(|u| u.client_id.as_str()).collect();
            assert_eq!(ids, ["site-1", "site-2", "site-3"]);
        }
        other => panic!("{other:?}"),
    }
    let agg = ParameterVector::from_vec(vec![0.5; DIMS]).unwrap();
    let (state, actions) = step(
        state,
        ServerEvent::RoundAggregated {
            round: 0,
            aggregate: agg,
            at_ms: 40,
        },
    );
    assert_eq!(audits(&actions), [AuditEventType::ModelSigned]);
    assert_eq!(state.phase, ServerPhase::Idle);
    assert_eq!(state.global.as_slice(), &[0.5; DIMS]);
    let rec = &state.history[0];
    assert!(!rec.aborted);
    assert_eq!(rec.duration_ms, 40);
    assert_eq!(rec.responded.len(), 3);
}

#[test]
fn deadline_with_quorum_aggregates_and_late_update_is_logged() {
    let ks = kits(3);
    let state = gathering(&ks, plan(0, &["site-1", "site-2", "site-3"], 2, false));
    let (state, _) = step(
        state,
        ServerEvent::UpdateReceived(signed(kit(&ks, "site-1"), 0, 1.0, plain(1.0))),
    );
    let (state, _) = step(
        state,
        ServerEvent::UpdateReceived(signed(kit(&ks, "site-2"), 0, 1.0, plain(1.0))),
    );
    let (state, actions) = step(
        state,
        ServerEvent::DeadlineFired {
            round: 0,
            at_ms: 1000,
        },
    );
    assert!(matches!(&actions[0], ServerAction::Aggregate { updates, .. } if updates.len() == 2));
    let (state, actions) = step(
        state,
        ServerEvent::UpdateReceived(signed(kit(&ks, "site-3"), 0, 1.0, plain(1.0))),
    );
    assert_eq!(audits(&actions), [AuditEventType::UpdateLate]);
    let (state, _) = step(
        state,
        ServerEvent::RoundAggregated {
            round: 0,
            aggregate: ParameterVector::zeros(DIMS),
            at_ms: 1001,
        },
    );
    let rec = &state.history[0];
    assert_eq!(rec.late_discarded.iter().collect::<Vec<_>>(), ["site-3"]);
    // After the round closes, the same straggler is a duplicate.
    let (_, actions) = step(
        state,
        ServerEvent::UpdateReceived(signed(kit(&ks, "site-3"), 0, 1.0, plain(1.0))),
    );
    assert_eq!(audits(&actions), [AuditEventType::UpdateRejected]);
}

#[test]
fn deadline_below_quorum_aborts() {
    let ks = kits(3);
    let state = gathering(&ks, plan(0, &["site-1", "site-2", "site-3"], 2, false));
    let (state, _) = step(
        state,
        ServerEvent::UpdateReceived(signed(kit(&ks, "site-1"), 0, 1.0, plain(1.0))),
    );
    let (state, actions) = step(
        state,
        ServerEvent::DeadlineFired {
            round: 0,
            at_ms: 1000,
        },
    );
    assert_eq!(audits(&actions), [AuditEventType::RoundAborted]);
    assert!(
        matches!(&actions[1], ServerAction::AbortRound { reason, .. } if reason == "quorum not reached")
    );
    assert!(state.history[0].aborted);
    assert_eq!(state.global.as_slice(), &[0.0; DIMS]);
    // Retrying needs a fresh round tag.
    let (state, actions) = step(
        state,
        ServerEvent::Start {
            plan: plan(0, &["site-1"], 1, false),
            at_ms: 1,
        },
    );
    assert!(matches!(actions[0], ServerAction::Ignored { .. }));
    let (_, actions) = step(
        state,
        ServerEvent::Start {
            plan: plan(1, &["site-1"], 1, false),
            at_ms: 1,
        },
    );
    assert_eq!(audits(&actions), [AuditEventType::TaskAssign]);
}

#[test]
fn masked_round_missing_one_client_aborts() {
    let ks = kits(3);
    let state = gathering(&ks, plan(0, &["site-1", "site-2", "site-3"], 1, true));
    let masked = |id| {
        signed(
            kit(&ks, id),
            0,
            1.0,
            UpdateBody::Masked(RingVector(vec![7; DIMS])),
        )
    };
    let (state, _) = step(state, ServerEvent::UpdateReceived(masked("site-1")));
    let (state, _) = step(state, ServerEvent::UpdateReceived(masked("site-2")));
    let (state, actions) = step(
        state,
        ServerEvent::DeadlineFired {
            round: 0,
            at_ms: 1000,
        },
    );
    assert!(
        matches!(&actions[1], ServerAction::AbortRound { reason, .. } if reason == "masked round is missing clients")
    );
    assert!(state.history[0].aborted);
}

#[test]
fn invalid_updates_rejected_with_reason() {
    let ks = kits(3);
    let state = gathering(&ks, plan(5, &["site-1", "site-2"], 2, false));
    let s1 = kit(&ks, "site-1");
    let mut forged = signed(s1, 5, 1.0, plain(1.0));
    forged.update.body = plain(2.0);
    let mut unsigned = signed(s1, 5, 1.0, plain(1.0));
    unsigned.signature.clear();
    let mut impostor = signed(kit(&ks, "site-2"), 5, 1.0, plain(1.0));
    impostor.update.client_id = "site-1".into();
    let cases = vec![
        (forged, "bad signature"),
        (unsigned, "bad signature"),
        (impostor, "bad signature"),
        (
            signed(kit(&ks, "server"), 5, 1.0, plain(1.0)),
            "bad signature",
        ),
        (
            signed(kit(&ks, "site-3"), 5, 1.0, plain(1.0)),
            "not invited",
        ),
        (signed(s1, 4, 1.0, plain(1.0)), "wrong round"),
        (signed(s1, 5, 0.0, plain(1.0)), "invalid weight"),
        (
            signed(s1, 5, 1.0, UpdateBody::Plain(ParameterVector::zeros(3))),
            "dimension mismatch",
        ),
        (signed(s1, 5, 1.0, nan_body()), "body does not match round"),
        (
            signed(s1, 5, 1.0, UpdateBody::Masked(RingVector(vec![0; DIMS]))),
            "body does not match round",
        ),
    ];
    let mut state = state;
    for (update, reason) in cases {
        let (s, actions) = step(state, ServerEvent::UpdateReceived(update));
        state = s;
        match &actions[..] {
            [ServerAction::Audit {
                event: AuditEventType::UpdateRejected,
                payload,
            }] => {
                assert!(
                    payload.ends_with(&format!("reason={reason}")),
                    "{payload} vs {reason}"
                );
            }
            other => panic!("{reason}: {other:?}"),
        }
    }
    let (state, _) = step(
        state,
        ServerEvent::UpdateReceived(signed(s1, 5, 1.0, plain(1.0))),
    );
    let (_, actions) = step(
        state,
        ServerEvent::UpdateReceived(signed(s1, 5, 1.0, plain(1.0))),
    );
    assert!(
        matches!(&actions[0], ServerAction::Audit { payload, .. } if payload.ends_with("reason=duplicate"))
    );
}

#[test]
fn start_validates_plan() {
    let ks = kits(2);
    let state = registered_server(&ks);
    let (state, a) = step(
        state,
        ServerEvent::Start {
            plan: plan(0, &["site-1", "site-9"], 1, false),
            at_ms: 0,
        },
    );
    assert!(matches!(a[0], ServerAction::Ignored { .. }));
    let (state, a) = step(
        state,
        ServerEvent::Start {
            plan: plan(0, &["site-1"], 2, false),
            at_ms: 0,
        },
    );
    assert!(matches!(a[0], ServerAction::Ignored { .. }));
    let (state, _) = step(
        state,
        ServerEvent::Start {
            plan: plan(0, &["site-1"], 1, false),
            at_ms: 0,
        },
    );
    let (state, a) = step(
        state,
        ServerEvent::Start {
            plan: plan(1, &["site-1"], 1, false),
            at_ms: 0,
        },
    );
    assert!(matches!(a[0], ServerAction::Ignored { .. }));
    let (state, a) = step(state, ServerEvent::Stop);
    assert_eq!(a, [ServerAction::Finish]);
    let (_, a) = step(state, ServerEvent::DeadlineFired { round: 0, at_ms: 5 });
    assert!(matches!(a[0], ServerAction::Ignored { .. }));
}

// ---- client machine ----

fn task(ks: &[StartupKit], round: u64, cohort: &[&str]) -> Task {
    let global = ParameterVector::zeros(DIMS);
    Task {
        round,
        cohort: cohort.iter().map(|s| s.to_string()).collect(),
        masked: false,
        signature: sign_model(&global, kit(ks, "server")),
        global,
    }
}

#[test]
fn client_checks_tasks_and_tracks_phase() {
    let ks = kits(2);
    let server = kit(&ks, "server").identity();
    let c = ClientState::new("site-1", DIMS, Some(server));
    let (c, _) = client_step(c, ClientEvent::RegistrationAcked);
    assert_eq!(c.phase, ClientPhase::WaitingForTask);

    let mut bad_sig = task(&ks, 0, &["site-1"]);
    bad_sig.signature = sign_model(&bad_sig.global, kit(&ks, "site-2"));
    let mut bad_dims = task(&ks, 0, &["site-1"]);
    bad_dims.global = ParameterVector::zeros(DIMS + 1);
    bad_dims.signature = sign_model(&bad_dims.global, kit(&ks, "server"));
    let mut c = c;
    for (t, reason) in [
        (bad_sig, "bad model signature"),
        (bad_dims, "dimension mismatch"),
        (task(&ks, 0, &["site-2"]), "not in cohort"),
    ] {
        let (s, a) = client_step(c, ClientEvent::TaskReceived(t));
        c = s;
        assert!(matches!(&a[0], ClientAction::AuditReject { reason: r } if r.ends_with(reason)));
        assert_eq!(c.phase, ClientPhase::WaitingForTask);
    }

    let (c, a) = client_step(c, ClientEvent::TaskReceived(task(&ks, 3, &["site-1"])));
    assert!(matches!(a[0], ClientAction::StartLocalTrain(_)));
    assert_eq!(c.phase, ClientPhase::Training { round: 3 });
    let (c, a) = client_step(c, ClientEvent::TaskReceived(task(&ks, 4, &["site-1"])));
    assert!(
        matches!(&a[0], ClientAction::RefuseTask { reason, .. } if reason == "already training")
    );
    let up = signed(kit(&ks, "site-1"), 3, 1.0, plain(0.0));
    let (c, a) = client_step(
        c,
        ClientEvent::TrainingDone {
            round: 3,
            update: up,
        },
    );
    assert!(matches!(a[0], ClientAction::Upload(_)));
    let (c, a) = client_step(c, ClientEvent::TaskReceived(task(&ks, 3, &["site-1"])));
    assert!(matches!(&a[0], ClientAction::RefuseTask { reason, .. } if reason == "stale round"));
    let (c, _) = client_step(c, ClientEvent::UploadAcked { round: 3 });
    assert_eq!(c.phase, ClientPhase::WaitingForTask);
    let (c, _) = client_step(c, ClientEvent::TaskReceived(task(&ks, 5, &["site-1"])));
    let (c, _) = client_step(c, ClientEvent::Aborted { round: 5 });
    assert_eq!(c.phase, ClientPhase::WaitingForTask);
}

// ---- fuzzing ----

/// Everything the fuzzer knows about the run, kept apart from the server.
struct Shadow {
    genuine: BTreeSet<[u8; 32]>,
    highest_start: Option<u64>,
    accepted_this_round: BTreeMap<String, u64>,
    aggregations: usize,
    aborts: usize,
}

fn check_invariants(
    state: &ServerState,
    before_round: Option<&RoundPlan>,
    actions: &[ServerAction],
    shadow: &mut Shadow,
) {
    for a in actions {
        match a {
            ServerAction::AbortRound { .. } => shadow.aborts += 1,
            ServerAction::Aggregate {
                round,
                masked,
                updates,
            } => {
                shadow.aggregations += 1;
                let plan = state.plan().expect("aggregating keeps the plan");
                assert_eq!(*round, plan.round);
                assert_eq!(*masked, plan.masked);
                assert!(
                    updates.len() >= plan.min_responses,
                    "aggregated below quorum"
                );
                if plan.masked {
                    assert_eq!(
                        updates.len(),
                        plan.invited.len(),
                        "masked round aggregated without full cohort"
                    );
                }
                let ids: Vec<&String> = updates.iter().map(|u| &u.client_id).collect();
                assert!(
                    ids.windows(2).all(|w| w[0] < w[1]),
                    "updates unsorted or duplicated"
                );
                for u in updates {
                    assert_eq!(u.round, *round, "round tag mismatch");
                    assert!(plan.invited.contains(&u.client_id));
                    assert!(
                        shadow.genuine.contains(&u.digest()),
                        "unsigned or forged update aggregated"
                    );
                }
            }
            ServerAction::Audit {
                event: AuditEventType::UpdateAccepted,
                payload,
            } => {
                let plan = before_round.expect("accepting needs a plan");
                let client = payload
                    .split_whitespace()
                    .find_map(|kv| kv.strip_prefix("client="))
                    .unwrap();
                assert!(plan.invited.contains(client));
                let prev = shadow
                    .accepted_this_round
                    .insert(client.to_string(), plan.round);
                assert_ne!(prev, Some(plan.round), "accepted twice in one round");
            }
            ServerAction::Scatter { round, .. } => {
                if let Some(h) = shadow.highest_start {
                    assert!(*round > h, "round tag reused");
                }
                shadow.highest_start = Some(*round);
            }
            _ => {}
        }
    }
    for rec in &state.history {
        if !rec.aborted {
            assert!(!rec.responded.is_empty());
        }
        assert!(rec.responded.is_subset(&rec.invited));
    }
    assert!(state.history.windows(2).all(|w| w[0].round < w[1].round));
}

#[test]
fn fuzzed_event_sequences_keep_invariants() {
    let ks = kits(6);
    let clients: Vec<&StartupKit> = ks.iter().filter(|k| k.site_id != "server").collect();
    let mut total = 0usize;
    let (mut aggregations, mut aborts) = (0, 0);
    for trial in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut state =
            ServerState::new(ParameterVector::zeros(DIMS), ks[0].roster.clone(), "fedavg");
        let mut shadow = Shadow {
            genuine: BTreeSet::new(),
            highest_start: None,
            accepted_this_round: BTreeMap::new(),
            aggregations: 0,
            aborts: 0,
        };
        let mut next_round = 0u64;
        for _ in 0..150 {
            let current = state.plan().map(|p| p.round).unwrap_or(next_round);
            let event = match rng.gen_range(0..10) {
                0 => {
                    let k = clients[rng.gen_range(0..clients.len())];
                    let nonce = vec![rng.gen()];
                    let good = rng.gen_bool(0.8);
                    let signer = if good {
                        k
                    } else {
                        clients[rng.gen_range(0..clients.len())]
                    };
                    ServerEvent::ClientRegistered {
                        site_id: k.site_id.clone(),
                        signature: signer.sign_digest(&register_digest(&k.site_id, &nonce)),
                        nonce,
                    }
                }
                1 => {
                    let reg: Vec<&String> = state.registered().iter().collect();
                    let pool: Vec<String> = if reg.is_empty() || rng.gen_bool(0.1) {
                        vec!["site-1".into()]
                    } else {
                        reg.iter().map(|s| s.to_string()).collect()
                    };
                    let k = rng.gen_range(1..=pool.len());
                    let invited: BTreeSet<String> =
                        rand::seq::index::sample(&mut rng, pool.len(), k)
                            .into_iter()
                            .map(|i| pool[i].clone())
                            .collect();
                    let round = if rng.gen_bool(0.9) {
                        next_round
                    } else {
                        rng.gen_range(0..next_round + 2)
                    };
                    next_round = next_round.max(round + 1);
                    shadow.accepted_this_round.clear();
                    ServerEvent::Start {
                        plan: RoundPlan {
                            round,
                            min_responses: rng.gen_range(0..=k + 1),
                            invited,
                            deadline_ms: 100,
                            masked: rng.gen_bool(0.3),
                        },
                        at_ms: 0,
                    }
                }
                2 => ServerEvent::TasksDispatched { round: current },
                3..=6 => {
                    let invited: Vec<&String> = state
                        .plan()
                        .map(|p| p.invited.iter().collect())
                        .unwrap_or_default();
                    let k = if !invited.is_empty() && rng.gen_bool(0.8) {
                        kit(&ks, invited[rng.gen_range(0..invited.len())])
                    } else {
                        clients[rng.gen_range(0..clients.len())]
                    };
                    let round = if rng.gen_bool(0.8) {
                        current
                    } else {
                        rng.gen_range(0..current + 2)
                    };
                    let want_masked = state.plan().is_some_and(|p| p.masked);
                    let body = if want_masked != rng.gen_bool(0.9) {
                        plain(rng.gen_range(-1.0..1.0))
                    } else {
                        UpdateBody::Masked(RingVector(vec![rng.gen(); DIMS]))
                    };
                    let mut u = signed(k, round, rng.gen_range(-0.2..3.0f64).max(0.0), body);
                    match rng.gen_range(0..16) {
                        0 => u.signature[rng.gen_range(0..64)] ^= 1 << rng.gen_range(0..8),
                        1 => u.signature.clear(),
                        2 => u.update.weight += 1.0,
                        3 => {
                            let other = &clients[rng.gen_range(0..clients.len())].site_id;
                            if *other == u.update.client_id {
                                shadow.genuine.insert(u.update.digest());
                            }
                            u.update.client_id = other.clone();
                        }
                        _ => {
                            shadow.genuine.insert(u.update.digest());
                        }
                    }
                    ServerEvent::UpdateReceived(u)
                }
                7 => ServerEvent::DeadlineFired {
                    round: if rng.gen_bool(0.9) {
                        current
                    } else {
                        current + 1
                    },
                    at_ms: 100,
                },
                8 => ServerEvent::RoundAggregated {
                    round: current,
                    aggregate: ParameterVector::from_vec(vec![rng.gen_range(-1.0..1.0); DIMS])
                        .unwrap(),
                    at_ms: 50,
                },
                _ => {
                    if rng.gen_bool(0.05) {
                        ServerEvent::Stop
                    } else {
                        ServerEvent::TasksDispatched { round: current + 1 }
                    }
                }
            };
            let before = state.plan().cloned();
            let (s, actions) = server_step(state, event);
            state = s;
            check_invariants(&state, before.as_ref(), &actions, &mut shadow);
            total += 1;
        }
        aggregations += shadow.aggregations;
        aborts += shadow.aborts;
    }
    assert!(total >= 10_000);
    assert!(
        aggregations >= 100 && aborts >= 100,
        "fuzzer too shallow: {aggregations} aggregations, {aborts} aborts"
    );
}
