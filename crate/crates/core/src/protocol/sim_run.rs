//! Whole federation in one thread over the simulated network.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::SiteEval;
use super::node::{
    audit_policies, ClientNode, FederationSpec, Outgoing, ServerNode, ServerOutput, Site,
};
use super::plan::{plan_round, RoundRecord};
use crate::error::{FedError, Result};
use crate::model::ParameterVector;
use crate::seeding::derive_seed;
use crate::transport::{NetEvent, SimNetConfig, SimNetwork, TraceEntry};
use crate::trustops::{provision, AuditLog, ManualClock, RosterSpec, StartupKit, SERVER_ID};

/// Registration attempts per client before it gives up.
const MAX_REGISTRATIONS: u32 = 4;

pub struct FederationOutcome {
    pub global: ParameterVector,
    pub history: Vec<RoundRecord>,
    /// Per-site rows in site-id order; sites without held-out data are absent.
    pub evals: Vec<SiteEval>,
    pub audit: AuditLog,
    pub trace: Vec<TraceEntry>,
    pub virtual_ms: u64,
    /// Rejections recorded by clients, as `(site, reason)`.
    pub client_rejections: Vec<(String, String)>,
}

/// Deterministic test-mode kits for `sites`.
pub fn sim_kits(sites: &[String], key_seed: u64) -> Result<Vec<StartupKit>> {
    provision(
        &RosterSpec {
            server_addr: "sim".into(),
            sites: sites.to_vec(),
            admins: Vec::new(),
        },
        Some(key_seed),
    )
}

pub fn plan_rng(plan_seed: u64, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        "fedmesh/plan",
        &[&plan_seed.to_le_bytes(), &round.to_le_bytes()],
    ))
}

struct Driver {
    net: SimNetwork,
    clock: Arc<ManualClock>,
    server: ServerNode,
    clients: BTreeMap<String, ClientNode>,
    /// Per client: `(register seq, attempts so far)`.
    registering: BTreeMap<String, (u64, u32)>,
    outcome: Option<super::node::RoundOutcome>,
}

impl Driver {
    fn now(&self) -> u64 {
        self.net.now_ms()
    }

    fn apply_server(&mut self, out: ServerOutput) -> Result<()> {
        for (to, msg) in out.sends {
            self.net.send(SERVER_ID, &to, msg)?;
        }
        if let Some((round, after)) = out.deadline {
            self.net.set_timer(SERVER_ID, after, round);
        }
        if let Some(o) = out.outcome {
            self.net.cancel_timers(SERVER_ID, |t| t == o.round);
            self.outcome = Some(o);
        }
        Ok(())
    }

    fn client_sends(&mut self, from: &str, outs: Vec<Outgoing>) -> Result<()> {
        for o in outs {
            let seq = self.net.send(from, SERVER_ID, o.message)?;
            if let Some(round) = o.upload_round {
                self.clients
                    .get_mut(from)
                    .expect("known client")
                    .track_upload(seq, round);
            }
        }
        Ok(())
    }

    fn register(&mut self, id: &str) -> Result<()> {
        let client = self.clients.get_mut(id).expect("known client");
        let msg = client.register_message();
        let seq = self.net.send(id, SERVER_ID, msg)?;
        let attempts = self.registering.get(id).map_or(0, |(_, a)| *a) + 1;
        self.registering.insert(id.to_string(), (seq, attempts));
        Ok(())
    }

    /// Handles one network event; `false` once the network is idle.
    fn pump_one(&mut self) -> Result<bool> {
        let Some(event) = self.net.next_event() else {
            return Ok(false);
        };
        let now = self.now();
        self.clock.set(now);
        let delivered = matches!(event, NetEvent::Acked { .. });
        match event {
            NetEvent::Delivered { to, envelope } if to == SERVER_ID => {
                let out = self
                    .server
                    .on_message(&envelope.sender, envelope.message, now)?;
                self.apply_server(out)?;
            }
            NetEvent::Delivered { to, envelope } => {
                if let Some(client) = self.clients.get_mut(&to) {
                    let outs = client.on_message(envelope.message)?;
                    self.client_sends(&to, outs)?;
                }
            }
            NetEvent::Acked { from, seq, .. } | NetEvent::Failed { from, seq, .. }
                if from != SERVER_ID =>
            {
                let reg = self.registering.get(&from).copied();
                match reg {
                    Some((reg_seq, attempts)) if reg_seq == seq => {
                        if delivered {
                            self.registering.remove(&from);
                            self.clients
                                .get_mut(&from)
                                .expect("known client")
                                .registration_acked()?;
                        } else if attempts < MAX_REGISTRATIONS {
                            self.register(&from)?;
                        } else {
                            self.registering.remove(&from);
                        }
                    }
                    _ => {
                        if let Some(c) = self.clients.get_mut(&from) {
                            c.delivery_result(seq, delivered)?;
                        }
                    }
                }
            }
            NetEvent::Acked { .. } | NetEvent::Failed { .. } => {}
            NetEvent::Timer { node, token } => {
                if node == SERVER_ID {
                    let out = self.server.on_deadline(token, now)?;
                    self.apply_server(out)?;
                }
            }
        }
        Ok(true)
    }

    fn pump_while(&mut self, mut busy: impl FnMut(&Self) -> bool) -> Result<()> {
        while busy(self) {
            if !self.pump_one()? {
                break;
            }
        }
        Ok(())
    }
}

/// Runs `spec.rounds` rounds of scatter, local training, gather and
/// aggregation, then cross-site evaluation. Fully determined by the seeds in
/// `spec` and `net`.
pub fn run_federation(
    spec: &FederationSpec,
    sites: Vec<Site>,
    net: SimNetConfig,
) -> Result<FederationOutcome> {
    let ids: Vec<String> = sites.iter().map(|s| s.id.clone()).collect();
    let kits = sim_kits(
        &ids,
        derive_seed("fedmesh/keys", &[&spec.model_seed.to_le_bytes()]),
    )?;
    run_federation_with_kits(spec, sites, net, kits)
}

/// Same as [`run_federation`] with caller-supplied kits. The first kit must
/// be the server's; the rest are matched to sites by id.
pub fn run_federation_with_kits(
    spec: &FederationSpec,
    sites: Vec<Site>,
    net: SimNetConfig,
    kits: Vec<StartupKit>,
) -> Result<FederationOutcome> {
    spec.validate()?;
    let mut kits = kits.into_iter();
    let server_kit = kits
        .next()
        .filter(|k| k.site_id == SERVER_ID)
        .ok_or_else(|| FedError::Config("first kit must be the server's".into()))?;
    let mut site_kits: BTreeMap<String, StartupKit> =
        kits.map(|k| (k.site_id.clone(), k)).collect();

    let clock = Arc::new(ManualClock::new(0));
    let mut server = ServerNode::new(
        server_kit,
        spec.train.zero_params(),
        spec.strategy.clone(),
        clock.clone(),
    );
    audit_policies(server.audit_mut(), &sites);

    let mut clients = BTreeMap::new();
    for site in sites {
        let kit = site_kits
            .remove(&site.id)
            .ok_or_else(|| FedError::UnknownSite(site.id.clone()))?;
        clients.insert(site.id.clone(), ClientNode::new(kit, site, spec.clone()));
    }

    let mut d = Driver {
        net: SimNetwork::new(net)?,
        clock,
        server,
        clients,
        registering: BTreeMap::new(),
        outcome: None,
    };

    let ids: Vec<String> = d.clients.keys().cloned().collect();
    for id in &ids {
        d.register(id)?;
    }
    // The server handles a Register before its ack can reach the client.
    d.pump_while(|d| !d.registering.is_empty())?;

    let mut round = 0u64;
    let mut completed = 0u64;
    let mut consecutive_aborts = 0;
    while completed < spec.rounds {
        let mut rng = plan_rng(spec.plan_seed, round);
        let mut plan = plan_round(
            round,
            d.server.registered(),
            spec.invite,
            spec.quorum,
            spec.deadline_ms,
            &mut rng,
        )?;
        plan.masked = spec.masked;
        let now = d.now();
        d.clock.set(now);
        let out = d.server.start_round(plan, now)?;
        d.apply_server(out)?;
        d.pump_while(|d| d.outcome.is_none())?;
        let outcome = d
            .outcome
            .take()
            .ok_or_else(|| FedError::Protocol(format!("round {round} stalled")))?;
        if outcome.completed {
            completed += 1;
            consecutive_aborts = 0;
        } else {
            consecutive_aborts += 1;
            if !spec.abort_retry || consecutive_aborts > 1 {
                return Err(FedError::RoundAborted {
                    round,
                    reason: outcome.reason,
                });
            }
        }
        round += 1;
    }

    let requests = d.server.eval_requests();
    let expected = requests.len();
    for (to, msg) in requests {
        d.net.send(SERVER_ID, &to, msg)?;
    }
    d.pump_while(|d| d.server.evals().len() < expected)?;
    d.server.stop();
    d.pump_while(|_| true)?;

    let virtual_ms = d.now();
    let client_rejections = d
        .clients
        .values()
        .flat_map(|c| {
            c.rejections()
                .iter()
                .map(|r| (c.site_id().to_string(), r.clone()))
        })
        .collect();
    let trace = d.net.trace().to_vec();
    let (state, audit, evals) = d.server.into_parts();
    Ok(FederationOutcome {
        global: state.global,
        history: state.history,
        evals: evals.into_values().collect(),
        audit,
        trace,
        virtual_ms,
        client_rejections,
    })
}
