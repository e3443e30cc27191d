//! Transport-agnostic server and client nodes. They wrap the pure state
//! machines and perform the side effects their actions ask for: training,
//! privacy filtering, masking, signing, aggregation and audit logging.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use super::client::{client_step, ClientAction, ClientEvent, ClientPhase, ClientState, Task};
use super::eval::SiteEval;
use super::messages::{register_digest, Message, SignedUpdate, SubmittedUpdate, UpdateBody};
use super::plan::{RoundPlan, RoundRecord};
use super::server::{server_step, ServerAction, ServerEvent, ServerState};
use crate::aggregation::{AggregationStrategy, ClientUpdate, StrategyKind};
use crate::error::{FedError, Result};
use crate::model::{
    count_predictions, featurize_all, local_train_featurized, Featurized, ParameterVector,
    TaggedSentence, TrainConfig,
};
use crate::privacy::{make_masks, mask_vector, ring_sum, MaskPairing, RingVector, SitePolicy};
use crate::seeding::{client_round_rng, client_round_seed};
use crate::trustops::{
    sign_model, verify_model, AuditEventType, AuditLog, Clock, StartupKit, SERVER_ID,
};

/// `Abort` round number used to refuse a registration.
pub const REGISTRATION_REFUSED: u64 = u64::MAX;

/// Round-level settings shared by every node of a federation.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationSpec {
    pub rounds: u64,
    /// Clients invited per round (k).
    pub invite: usize,
    /// Minimum responses to aggregate (m).
    pub quorum: usize,
    pub deadline_ms: u64,
    pub strategy: AggregationStrategy,
    pub train: TrainConfig,
    pub model_seed: u64,
    /// Seeds client sampling.
    pub plan_seed: u64,
    /// Retry an aborted round once before failing the run.
    pub abort_retry: bool,
    /// Pairwise masking for every round.
    pub masked: bool,
    /// Shared by clients only; seeds the pairwise masks.
    pub cohort_secret: u64,
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.strategy.validate()?;
        if self.quorum == 0 || self.quorum > self.invite {
            return Err(FedError::Config(format!(
                "federation: need 1 <= quorum <= invite, got {} and {}",
                self.quorum, self.invite
            )));
        }
        if self.masked
            && (self.strategy.kind != StrategyKind::Fedavg || self.strategy.normalize_to.is_some())
        {
            return Err(FedError::Config(
                "federation: masking only supports plain fedavg".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Behavior {
    Honest,
    /// Sends a random direction scaled to `norm` instead of its real delta.
    Byzantine {
        norm: f64,
    },
}

/// One site's local state: training shard, held-out split and policy.
#[derive(Debug, Clone)]
pub struct Site {
    pub id: String,
    pub shard: Vec<TaggedSentence>,
    pub heldout: Vec<TaggedSentence>,
    pub policy: SitePolicy,
    pub behavior: Behavior,
}

impl Site {
    pub fn new(
        id: impl Into<String>,
        shard: Vec<TaggedSentence>,
        heldout: Vec<TaggedSentence>,
    ) -> Self {
        let id = id.into();
        Self {
            policy: SitePolicy::open(id.clone()),
            id,
            shard,
            heldout,
            behavior: Behavior::Honest,
        }
    }
}

/// Combines one round's updates into the global delta. Masked updates are
/// summed in the ring (in client-id order), decoded and divided by the total
/// weight.
pub fn aggregate_round(
    strategy: &AggregationStrategy,
    mut updates: Vec<SubmittedUpdate>,
    reference: Option<&ParameterVector>,
) -> Result<ParameterVector> {
    updates.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let masked = updates
        .iter()
        .filter(|u| matches!(u.body, UpdateBody::Masked(_)))
        .count();
    if masked == 0 {
        let plain: Vec<ClientUpdate> = updates
            .into_iter()
            .map(|u| u.into_client_update().expect("plain update"))
            .collect();
        return strategy.aggregate(&plain, reference);
    }
    if masked != updates.len() {
        return Err(FedError::Protocol("mixed masked and plain updates".into()));
    }
    if strategy.kind != StrategyKind::Fedavg {
        return Err(FedError::Config("masked rounds only support fedavg".into()));
    }
    let total_weight: f64 = updates.iter().map(|u| u.weight).sum();
    let rings: Vec<&RingVector> = updates
        .iter()
        .map(|u| match &u.body {
            UpdateBody::Masked(r) => r,
            UpdateBody::Plain(_) => unreachable!(),
        })
        .collect();
    let sum = ring_sum(rings).ok_or(FedError::EmptyUpdates)?;
    Ok(sum.decode().scaled(1.0 / total_weight))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub round: u64,
    pub completed: bool,
    pub reason: String,
}

/// Side effects the transport must carry out for the server.
#[derive(Debug, Default)]
pub struct ServerOutput {
    pub sends: Vec<(String, Message)>,
    /// `(round, after_ms)`
    pub deadline: Option<(u64, u64)>,
    pub outcome: Option<RoundOutcome>,
}

pub struct ServerNode {
    state: Option<ServerState>,
    kit: StartupKit,
    strategy: AggregationStrategy,
    audit: AuditLog,
    prev_aggregate: Option<ParameterVector>,
    evals: BTreeMap<String, SiteEval>,
}

impl ServerNode {
    pub fn new(
        kit: StartupKit,
        initial: ParameterVector,
        strategy: AggregationStrategy,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let state = ServerState::new(initial, kit.roster.clone(), strategy.kind.as_str());
        Self {
            state: Some(state),
            kit,
            strategy,
            audit: AuditLog::new(clock),
            prev_aggregate: None,
            evals: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &ServerState {
        self.state.as_ref().expect("state present between steps")
    }

    pub fn global(&self) -> &ParameterVector {
        &self.state().global
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.state().history
    }

    pub fn registered(&self) -> &BTreeSet<String> {
        self.state().registered()
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn audit_mut(&mut self) -> &mut AuditLog {
        &mut self.audit
    }

    pub fn evals(&self) -> &BTreeMap<String, SiteEval> {
        &self.evals
    }

    pub fn into_parts(self) -> (ServerState, AuditLog, BTreeMap<String, SiteEval>) {
        (self.state.expect("state present"), self.audit, self.evals)
    }

    fn step(&mut self, event: ServerEvent, now_ms: u64, out: &mut ServerOutput) -> Result<()> {
        let state = self.state.take().expect("state present between steps");
        let (state, actions) = server_step(state, event);
        self.state = Some(state);
        for action in actions {
            match action {
                ServerAction::Audit { event, payload } => {
                    self.audit.append(event, &payload);
                }
                ServerAction::AckRegistration { .. }
                | ServerAction::Ignored { .. }
                | ServerAction::Finish => {}
                ServerAction::RefuseRegistration { site_id, reason } => out.sends.push((
                    site_id,
                    Message::Abort {
                        round: REGISTRATION_REFUSED,
                        reason: format!("registration refused: {reason}"),
                    },
                )),
                ServerAction::Scatter {
                    round,
                    invited,
                    masked,
                } => {
                    let global = self.global().clone();
                    let signature = sign_model(&global, &self.kit);
                    let cohort: Vec<String> = invited.iter().cloned().collect();
                    for to in &invited {
                        out.sends.push((
                            to.clone(),
                            Message::TaskAssign {
                                round,
                                cohort: cohort.clone(),
                                masked,
                                global: global.clone(),
                                signature: signature.clone(),
                            },
                        ));
                    }
                }
                ServerAction::ArmDeadline { round, after_ms } => {
                    out.deadline = Some((round, after_ms))
                }
                ServerAction::Aggregate { round, updates, .. } => {
                    let aggregate =
                        aggregate_round(&self.strategy, updates, self.prev_aggregate.as_ref())?;
                    self.prev_aggregate = Some(aggregate.clone());
                    self.step(
                        ServerEvent::RoundAggregated {
                            round,
                            aggregate,
                            at_ms: now_ms,
                        },
                        now_ms,
                        out,
                    )?;
                    out.outcome = Some(RoundOutcome {
                        round,
                        completed: true,
                        reason: String::new(),
                    });
                }
                ServerAction::AbortRound {
                    round,
                    invited,
                    reason,
                } => {
                    for to in invited {
                        out.sends.push((
                            to,
                            Message::Abort {
                                round,
                                reason: reason.clone(),
                            },
                        ));
                    }
                    out.outcome = Some(RoundOutcome {
                        round,
                        completed: false,
                        reason,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn start_round(&mut self, plan: RoundPlan, now_ms: u64) -> Result<ServerOutput> {
        let mut out = ServerOutput::default();
        let round = plan.round;
        self.step(
            ServerEvent::Start {
                plan,
                at_ms: now_ms,
            },
            now_ms,
            &mut out,
        )?;
        if out.sends.is_empty() {
            return Err(FedError::Protocol(format!("round {round} could not start")));
        }
        self.step(ServerEvent::TasksDispatched { round }, now_ms, &mut out)?;
        Ok(out)
    }

    pub fn on_deadline(&mut self, round: u64, now_ms: u64) -> Result<ServerOutput> {
        let mut out = ServerOutput::default();
        self.step(
            ServerEvent::DeadlineFired {
                round,
                at_ms: now_ms,
            },
            now_ms,
            &mut out,
        )?;
        Ok(out)
    }

    pub fn on_message(
        &mut self,
        sender: &str,
        message: Message,
        now_ms: u64,
    ) -> Result<ServerOutput> {
        let mut out = ServerOutput::default();
        match message {
            Message::Register {
                site_id,
                nonce,
                signature,
            } => self.step(
                ServerEvent::ClientRegistered {
                    site_id,
                    nonce,
                    signature,
                },
                now_ms,
                &mut out,
            )?,
            Message::UpdateSubmit(signed) => {
                self.step(ServerEvent::UpdateReceived(signed), now_ms, &mut out)?
            }
            Message::EvalReport {
                site_id,
                sentences,
                counts,
            } => {
                if site_id == sender && self.registered().contains(&site_id) && sentences > 0 {
                    self.evals.insert(
                        site_id.clone(),
                        SiteEval::from_counts(site_id, sentences, counts),
                    );
                }
            }
            Message::TaskAssign { .. }
            | Message::Ack { .. }
            | Message::Abort { .. }
            | Message::EvalRequest { .. } => {}
        }
        Ok(out)
    }

    pub fn stop(&mut self) {
        let mut out = ServerOutput::default();
        self.step(ServerEvent::Stop, 0, &mut out)
            .expect("stop has no fallible actions");
    }

    /// Signed evaluation requests for every registered site.
    pub fn eval_requests(&self) -> Vec<(String, Message)> {
        let params = self.global().clone();
        let signature = sign_model(&params, &self.kit);
        self.registered()
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    Message::EvalRequest {
                        params: params.clone(),
                        signature: signature.clone(),
                    },
                )
            })
            .collect()
    }
}

/// What a client asks its transport to send.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub message: Message,
    /// Set for uploads so the delivery result can be routed back.
    pub upload_round: Option<u64>,
}

pub struct ClientNode {
    kit: StartupKit,
    state: Option<ClientState>,
    site: Site,
    feats: Vec<Featurized>,
    spec: FederationSpec,
    uploads: BTreeMap<u64, u64>,
    refused: Option<String>,
    rejections: Vec<String>,
    nonce_counter: u64,
}

impl ClientNode {
    pub fn new(kit: StartupKit, site: Site, spec: FederationSpec) -> Self {
        let server = kit.roster.get(SERVER_ID).cloned();
        let state = ClientState::new(kit.site_id.clone(), spec.train.dims(), server);
        let feats = featurize_all(&site.shard, &spec.train);
        Self {
            kit,
            state: Some(state),
            site,
            feats,
            spec,
            uploads: BTreeMap::new(),
            refused: None,
            rejections: Vec::new(),
            nonce_counter: 0,
        }
    }

    pub fn site_id(&self) -> &str {
        &self.kit.site_id
    }

    pub fn phase(&self) -> ClientPhase {
        self.state.as_ref().expect("state present").phase
    }

    pub fn refused(&self) -> Option<&str> {
        self.refused.as_deref()
    }

    /// Reasons for every task or request this client rejected.
    pub fn rejections(&self) -> &[String] {
        &self.rejections
    }

    pub fn register_message(&mut self) -> Message {
        self.nonce_counter += 1;
        let mut nonce = self.kit.site_id.as_bytes().to_vec();
        nonce.extend_from_slice(&self.nonce_counter.to_be_bytes());
        let signature = self
            .kit
            .sign_digest(&register_digest(&self.kit.site_id, &nonce));
        Message::Register {
            site_id: self.kit.site_id.clone(),
            nonce,
            signature,
        }
    }

    fn step(&mut self, event: ClientEvent) -> Result<Vec<Outgoing>> {
        let state = self.state.take().expect("state present between steps");
        let (state, actions) = client_step(state, event);
        self.state = Some(state);
        let mut out = Vec::new();
        for action in actions {
            match action {
                ClientAction::StartLocalTrain(task) => {
                    let round = task.round;
                    let update = self.train(&task)?;
                    out.extend(self.step(ClientEvent::TrainingDone { round, update })?);
                }
                ClientAction::Upload(signed) => out.push(Outgoing {
                    upload_round: Some(signed.update.round),
                    message: Message::UpdateSubmit(signed),
                }),
                ClientAction::RefuseTask { round, reason } => {
                    self.rejections.push(format!("round {round}: {reason}"));
                }
                ClientAction::AuditReject { reason } => self.rejections.push(reason),
            }
        }
        Ok(out)
    }

    pub fn registration_acked(&mut self) -> Result<()> {
        self.step(ClientEvent::RegistrationAcked).map(|_| ())
    }

    pub fn on_message(&mut self, message: Message) -> Result<Vec<Outgoing>> {
        match message {
            Message::TaskAssign {
                round,
                cohort,
                masked,
                global,
                signature,
            } => self.step(ClientEvent::TaskReceived(Task {
                round,
                cohort,
                masked,
                global,
                signature,
            })),
            Message::Abort { round, reason } if round == REGISTRATION_REFUSED => {
                self.refused = Some(reason);
                Ok(Vec::new())
            }
            Message::Abort { round, .. } => self.step(ClientEvent::Aborted { round }),
            Message::EvalRequest { params, signature } => {
                let server = self.kit.roster.get(SERVER_ID);
                if !server.is_some_and(|s| verify_model(&params, &signature, s)) {
                    self.rejections
                        .push("eval request: bad model signature".into());
                    return Ok(Vec::new());
                }
                if params.dims() != self.spec.train.dims() {
                    self.rejections
                        .push("eval request: dimension mismatch".into());
                    return Ok(Vec::new());
                }
                let counts = count_predictions(&params, &self.site.heldout, &self.spec.train);
                Ok(vec![Outgoing {
                    message: Message::EvalReport {
                        site_id: self.kit.site_id.clone(),
                        sentences: self.site.heldout.len() as u64,
                        counts,
                    },
                    upload_round: None,
                }])
            }
            Message::Register { .. }
            | Message::UpdateSubmit(_)
            | Message::Ack { .. }
            | Message::EvalReport { .. } => Ok(Vec::new()),
        }
    }

    /// Remembers which transport sequence number carried an upload.
    pub fn track_upload(&mut self, seq: u64, round: u64) {
        self.uploads.insert(seq, round);
    }

    pub fn delivery_result(&mut self, seq: u64, delivered: bool) -> Result<()> {
        if let Some(round) = self.uploads.remove(&seq) {
            let event = if delivered {
                ClientEvent::UploadAcked { round }
            } else {
                ClientEvent::UploadFailed { round }
            };
            self.step(event)?;
        }
        Ok(())
    }

    /// Local training, privacy filters, optional masking, signature.
    fn train(&self, task: &Task) -> Result<SignedUpdate> {
        let id = &self.kit.site_id;
        let seed = self.spec.model_seed;
        let mut config = self.spec.train.clone();
        config.seed = client_round_seed("fedmesh/train", seed, id, task.round);
        let reference = (config.fedprox_mu > 0.0).then_some(&task.global);
        let (trained, _) = local_train_featurized(&task.global, &self.feats, &config, reference)?;
        let mut delta = trained.sub(&task.global);

        let mut rng = client_round_rng("fedmesh/privacy", seed, id, task.round);
        if let Behavior::Byzantine { norm } = self.site.behavior {
            let noise: Vec<f64> = (0..delta.dims())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let noise = ParameterVector::from_vec(noise)?;
            delta = noise.scaled(norm / noise.norm_l2().max(f64::MIN_POSITIVE));
        }
        let delta = self.site.policy.apply(&delta, &mut rng)?;
        let weight = self.site.shard.len() as f64;
        let body = if task.masked {
            let pairing = MaskPairing::derive(task.round, &task.cohort, self.spec.cohort_secret);
            let mask = make_masks(&pairing, id, delta.dims())?;
            UpdateBody::Masked(mask_vector(&delta.scaled(weight), &mask)?)
        } else {
            UpdateBody::Plain(delta)
        };
        let update = SubmittedUpdate {
            client_id: id.clone(),
            round: task.round,
            weight,
            body,
        };
        let signature = self.kit.sign_digest(&update.digest());
        Ok(SignedUpdate { update, signature })
    }
}

/// Audit entries recording each non-trivial site policy before training.
pub fn audit_policies(log: &mut AuditLog, sites: &[Site]) {
    for site in sites.iter().filter(|s| !s.policy.is_open()) {
        let p = &site.policy;
        let mut payload = format!("site={}", site.id);
        if let Some(c) = p.clip_norm {
            payload.push_str(&format!(" clip_norm={c}"));
        }
        if let Some(dp) = p.dp {
            payload.push_str(&format!(" dp_epsilon={} dp_delta={}", dp.epsilon, dp.delta));
        }
        if let Some(svt) = p.svt {
            payload.push_str(&format!(
                " svt_fraction={} svt_c={} svt_epsilon={}",
                svt.threshold_fraction, svt.budget_c, svt.epsilon
            ));
        }
        payload.push_str(&format!(" masking={}", p.masking_enabled));
        log.append(AuditEventType::PolicyApplied, &payload);
    }
}
