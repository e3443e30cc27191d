//! Pure server round state machine.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::messages::{register_digest, SignedUpdate, SubmittedUpdate, UpdateBody};
use super::plan::{join_ids, RoundPlan, RoundRecord};
use crate::model::ParameterVector;
use crate::trustops::{model_digest, AuditEventType, Role, Roster};

#[derive(Debug, Clone, PartialEq)]
pub enum ServerPhase {
    Idle,
    Scattering {
        round: u64,
    },
    Gathering {
        round: u64,
        received: BTreeSet<String>,
    },
    Aggregating {
        round: u64,
    },
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerEvent {
    ClientRegistered {
        site_id: String,
        nonce: Vec<u8>,
        signature: Vec<u8>,
    },
    Start {
        plan: RoundPlan,
        at_ms: u64,
    },
    /// Every task of the current round has been handed to the transport.
    TasksDispatched {
        round: u64,
    },
    UpdateReceived(SignedUpdate),
    DeadlineFired {
        round: u64,
        at_ms: u64,
    },
    RoundAggregated {
        round: u64,
        aggregate: ParameterVector,
        at_ms: u64,
    },
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerAction {
    Audit {
        event: AuditEventType,
        payload: String,
    },
    AckRegistration {
        site_id: String,
    },
    RefuseRegistration {
        site_id: String,
        reason: String,
    },
    Scatter {
        round: u64,
        invited: BTreeSet<String>,
        masked: bool,
    },
    ArmDeadline {
        round: u64,
        after_ms: u64,
    },
    /// Updates are sorted by client id.
    Aggregate {
        round: u64,
        masked: bool,
        updates: Vec<SubmittedUpdate>,
    },
    AbortRound {
        round: u64,
        invited: BTreeSet<String>,
        reason: String,
    },
    /// The event did not apply in the current phase; nothing changed.
    Ignored {
        reason: String,
    },
    Finish,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub phase: ServerPhase,
    pub global: ParameterVector,
    pub history: Vec<RoundRecord>,
    roster: Roster,
    registered: BTreeSet<String>,
    strategy: String,
    plan: Option<RoundPlan>,
    started_ms: u64,
    pending: Vec<SubmittedUpdate>,
    /// Clients whose updates went into the aggregation in progress.
    responded: BTreeSet<String>,
    late_current: BTreeSet<String>,
    next_round: u64,
}

impl ServerState {
    pub fn new(global: ParameterVector, roster: Roster, strategy: impl Into<String>) -> Self {
        Self {
            phase: ServerPhase::Idle,
            global,
            history: Vec::new(),
            roster,
            registered: BTreeSet::new(),
            strategy: strategy.into(),
            plan: None,
            started_ms: 0,
            pending: Vec::new(),
            responded: BTreeSet::new(),
            late_current: BTreeSet::new(),
            next_round: 0,
        }
    }

    pub fn registered(&self) -> &BTreeSet<String> {
        &self.registered
    }

    pub fn plan(&self) -> Option<&RoundPlan> {
        self.plan.as_ref()
    }

    pub fn strategy(&self) -> &str {
        &self.strategy
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }
}

fn audit(event: AuditEventType, payload: String) -> ServerAction {
    ServerAction::Audit { event, payload }
}

fn ignored(reason: impl Into<String>) -> Vec<ServerAction> {
    vec![ServerAction::Ignored {
        reason: reason.into(),
    }]
}

fn reject(update: &SubmittedUpdate, reason: &str) -> Vec<ServerAction> {
    vec![audit(
        AuditEventType::UpdateRejected,
        format!(
            "round={} client={} reason={reason}",
            update.round, update.client_id
        ),
    )]
}

/// Advances the server by one event. All state changes happen here.
pub fn server_step(mut state: ServerState, event: ServerEvent) -> (ServerState, Vec<ServerAction>) {
    if state.phase == ServerPhase::Finished {
        return (state, ignored("server finished"));
    }
    let actions = match event {
        ServerEvent::ClientRegistered {
            site_id,
            nonce,
            signature,
        } => on_register(&mut state, site_id, &nonce, &signature),
        ServerEvent::Start { plan, at_ms } => on_start(&mut state, plan, at_ms),
        ServerEvent::TasksDispatched { round } => match (&state.phase, &state.plan) {
            (ServerPhase::Scattering { round: r }, Some(plan)) if *r == round => {
                let after_ms = plan.deadline_ms;
                state.phase = ServerPhase::Gathering {
                    round,
                    received: BTreeSet::new(),
                };
                vec![ServerAction::ArmDeadline { round, after_ms }]
            }
            _ => ignored("no round is scattering"),
        },
        ServerEvent::UpdateReceived(signed) => on_update(&mut state, signed),
        ServerEvent::DeadlineFired { round, at_ms } => on_deadline(&mut state, round, at_ms),
        ServerEvent::RoundAggregated {
            round,
            aggregate,
            at_ms,
        } => on_aggregated(&mut state, round, aggregate, at_ms),
        ServerEvent::Stop => {
            state.phase = ServerPhase::Finished;
            state.plan = None;
            state.pending.clear();
            state.responded.clear();
            state.late_current.clear();
            vec![ServerAction::Finish]
        }
    };
    (state, actions)
}

fn on_register(
    state: &mut ServerState,
    site_id: String,
    nonce: &[u8],
    signature: &[u8],
) -> Vec<ServerAction> {
    let verdict = match state.roster.get(&site_id) {
        None => Err("unknown site"),
        Some(id) if id.role != Role::Client => Err("not a client identity"),
        Some(id) if !id.verify_digest(&register_digest(&site_id, nonce), signature) => {
            Err("bad signature")
        }
        Some(_) => Ok(()),
    };
    match verdict {
        Ok(()) => {
            state.registered.insert(site_id.clone());
            vec![
                audit(
                    AuditEventType::Register,
                    format!("site={site_id} status=accepted"),
                ),
                ServerAction::AckRegistration { site_id },
            ]
        }
        Err(reason) => vec![
            audit(
                AuditEventType::Register,
                format!("site={site_id} status=rejected reason={reason}"),
            ),
            ServerAction::RefuseRegistration {
                site_id,
                reason: reason.to_string(),
            },
        ],
    }
}

fn on_start(state: &mut ServerState, plan: RoundPlan, at_ms: u64) -> Vec<ServerAction> {
    if state.phase != ServerPhase::Idle {
        return ignored("a round is already in progress");
    }
    if plan.round < state.next_round {
        return ignored(format!(
            "round {} is not newer than {}",
            plan.round, state.next_round
        ));
    }
    if let Err(e) = plan.validate(&state.registered) {
        return ignored(e.to_string());
    }
    let round = plan.round;
    let payload = format!(
        "round={round} invited={} m={} deadline_ms={} masked={}",
        join_ids(&plan.invited),
        plan.min_responses,
        plan.deadline_ms,
        plan.masked
    );
    let actions = vec![
        audit(AuditEventType::TaskAssign, payload),
        ServerAction::Scatter {
            round,
            invited: plan.invited.clone(),
            masked: plan.masked,
        },
    ];
    state.next_round = round + 1;
    state.started_ms = at_ms;
    state.pending.clear();
    state.plan = Some(plan);
    state.phase = ServerPhase::Scattering { round };
    actions
}

fn on_update(state: &mut ServerState, signed: SignedUpdate) -> Vec<ServerAction> {
    let SignedUpdate { update, signature } = signed;
    let authentic = state.roster.get(&update.client_id).is_some_and(|id| {
        id.role == Role::Client && id.verify_digest(&update.digest(), &signature)
    });
    if !authentic {
        let reason = if state.roster.get(&update.client_id).is_none() {
            "unknown client"
        } else {
            "bad signature"
        };
        return reject(&update, reason);
    }

    let current = match &state.phase {
        ServerPhase::Gathering { round, .. }
        | ServerPhase::Aggregating { round }
        | ServerPhase::Scattering { round } => Some(*round),
        _ => None,
    };
    let gathering_this =
        matches!(&state.phase, ServerPhase::Gathering { round, .. } if *round == update.round);
    if !gathering_this {
        return on_stale_update(state, &update, current);
    }

    let plan = state.plan.as_ref().expect("gathering implies a plan");
    if !plan.invited.contains(&update.client_id) {
        return reject(&update, "not invited");
    }
    let ServerPhase::Gathering { received, .. } = &state.phase else {
        unreachable!()
    };
    if received.contains(&update.client_id) {
        return reject(&update, "duplicate");
    }
    if update.body.dims() != state.global.dims() {
        return reject(&update, "dimension mismatch");
    }
    if !(update.weight.is_finite() && update.weight > 0.0) {
        return reject(&update, "invalid weight");
    }
    let body_ok = match &update.body {
        UpdateBody::Plain(p) => !plan.masked && p.is_finite(),
        UpdateBody::Masked(_) => plan.masked,
    };
    if !body_ok {
        return reject(&update, "body does not match round");
    }

    let mut actions = vec![audit(
        AuditEventType::UpdateAccepted,
        format!(
            "round={} client={} weight={}",
            update.round, update.client_id, update.weight
        ),
    )];
    let k = plan.invited.len();
    let masked = plan.masked;
    let round = update.round;
    if let ServerPhase::Gathering { received, .. } = &mut state.phase {
        received.insert(update.client_id.clone());
    }
    state.pending.push(update);
    if state.pending.len() == k {
        actions.push(begin_aggregation(state, round, masked));
    }
    actions
}

/// An authentic update that is not for the round being gathered.
fn on_stale_update(
    state: &mut ServerState,
    update: &SubmittedUpdate,
    current: Option<u64>,
) -> Vec<ServerAction> {
    let late_for_current = current == Some(update.round)
        && matches!(state.phase, ServerPhase::Aggregating { .. })
        && state
            .plan
            .as_ref()
            .is_some_and(|p| p.invited.contains(&update.client_id))
        && !state.responded.contains(&update.client_id)
        && state.late_current.insert(update.client_id.clone());
    if late_for_current {
        return vec![late(update)];
    }
    if let Some(rec) = state
        .history
        .iter_mut()
        .rev()
        .find(|r| r.round == update.round)
    {
        if rec.invited.contains(&update.client_id)
            && !rec.responded.contains(&update.client_id)
            && rec.late_discarded.insert(update.client_id.clone())
        {
            return vec![late(update)];
        }
        return reject(update, "duplicate");
    }
    reject(update, "wrong round")
}

fn late(update: &SubmittedUpdate) -> ServerAction {
    audit(
        AuditEventType::UpdateLate,
        format!("round={} client={}", update.round, update.client_id),
    )
}

fn begin_aggregation(state: &mut ServerState, round: u64, masked: bool) -> ServerAction {
    let mut updates = std::mem::take(&mut state.pending);
    updates.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    state.responded = updates.iter().map(|u| u.client_id.clone()).collect();
    state.phase = ServerPhase::Aggregating { round };
    ServerAction::Aggregate {
        round,
        masked,
        updates,
    }
}

fn on_deadline(state: &mut ServerState, round: u64, at_ms: u64) -> Vec<ServerAction> {
    let received = match &state.phase {
        ServerPhase::Gathering { round: r, received } if *r == round => received.clone(),
        _ => return ignored("stale deadline"),
    };
    let plan = state.plan.as_ref().expect("gathering implies a plan");
    let short = if plan.masked {
        (received.len() < plan.invited.len()).then_some("masked round is missing clients")
    } else {
        (received.len() < plan.min_responses).then_some("quorum not reached")
    };
    let Some(reason) = short else {
        let masked = plan.masked;
        return vec![begin_aggregation(state, round, masked)];
    };

    let plan = state.plan.take().expect("checked above");
    let duration_ms = at_ms.saturating_sub(state.started_ms);
    state.history.push(RoundRecord {
        round,
        invited: plan.invited.clone(),
        responded: received.clone(),
        late_discarded: BTreeSet::new(),
        strategy: state.strategy.clone(),
        aggregate_norm: 0.0,
        duration_ms,
        aborted: true,
    });
    state.pending.clear();
    state.phase = ServerPhase::Idle;
    vec![
        audit(
            AuditEventType::RoundAborted,
            format!(
                "round={round} received={} strategy={} duration_ms={duration_ms} reason={reason}",
                join_ids(&received),
                state.strategy
            ),
        ),
        ServerAction::AbortRound {
            round,
            invited: plan.invited,
            reason: reason.to_string(),
        },
    ]
}

fn on_aggregated(
    state: &mut ServerState,
    round: u64,
    aggregate: ParameterVector,
    at_ms: u64,
) -> Vec<ServerAction> {
    if state.phase != (ServerPhase::Aggregating { round }) {
        return ignored("no aggregation pending for this round");
    }
    if aggregate.dims() != state.global.dims() || !aggregate.is_finite() {
        return ignored("aggregate has wrong shape or non-finite values");
    }
    let plan = state.plan.take().expect("aggregating implies a plan");
    let responded = std::mem::take(&mut state.responded);
    let norm = aggregate.norm_l2();
    state.global.add_assign(&aggregate);
    let duration_ms = at_ms.saturating_sub(state.started_ms);
    let mut payload = format!(
        "round={round} responded={} strategy={} norm={norm} duration_ms={duration_ms} digest=",
        join_ids(&responded),
        state.strategy
    );
    for b in model_digest(&state.global) {
        let _ = write!(payload, "{b:02x}");
    }
    state.history.push(RoundRecord {
        round,
        invited: plan.invited,
        responded,
        late_discarded: std::mem::take(&mut state.late_current),
        strategy: state.strategy.clone(),
        aggregate_norm: norm,
        duration_ms,
        aborted: false,
    });
    state.phase = ServerPhase::Idle;
    vec![audit(AuditEventType::ModelSigned, payload)]
}
