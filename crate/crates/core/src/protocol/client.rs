//! Pure client state machine: one task at a time.

use super::messages::SignedUpdate;
use crate::model::ParameterVector;
use crate::trustops::{verify_model, Identity};

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub round: u64,
    pub cohort: Vec<String>,
    pub masked: bool,
    pub global: ParameterVector,
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Registered,
    WaitingForTask,
    Training { round: u64 },
    Uploading { round: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    RegistrationAcked,
    TaskReceived(Task),
    TrainingDone {
        round: u64,
        update: SignedUpdate,
    },
    UploadAcked {
        round: u64,
    },
    /// Delivery gave up; the server will treat us as a non-responder.
    UploadFailed {
        round: u64,
    },
    Aborted {
        round: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientAction {
    StartLocalTrain(Task),
    Upload(SignedUpdate),
    RefuseTask { round: u64, reason: String },
    AuditReject { reason: String },
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub site_id: String,
    pub phase: ClientPhase,
    server: Option<Identity>,
    dims: usize,
    last_round: Option<u64>,
}

impl ClientState {
    /// `server` is the identity whose signature tasks must carry; `None`
    /// skips the check.
    pub fn new(site_id: impl Into<String>, dims: usize, server: Option<Identity>) -> Self {
        Self {
            site_id: site_id.into(),
            phase: ClientPhase::Registered,
            server,
            dims,
            last_round: None,
        }
    }

    fn task_problem(&self, task: &Task) -> Option<&'static str> {
        if task.global.dims() != self.dims {
            return Some("dimension mismatch");
        }
        if !task.global.is_finite() {
            return Some("non-finite global model");
        }
        if !task.cohort.contains(&self.site_id) {
            return Some("not in cohort");
        }
        if let Some(server) = &self.server {
            if !verify_model(&task.global, &task.signature, server) {
                return Some("bad model signature");
            }
        }
        None
    }
}

pub fn client_step(mut state: ClientState, event: ClientEvent) -> (ClientState, Vec<ClientAction>) {
    let actions = match event {
        ClientEvent::RegistrationAcked => {
            if state.phase == ClientPhase::Registered {
                state.phase = ClientPhase::WaitingForTask;
            }
            Vec::new()
        }
        ClientEvent::TaskReceived(task) => {
            if let Some(reason) = state.task_problem(&task) {
                return (
                    state,
                    vec![ClientAction::AuditReject {
                        reason: format!("task for round {}: {reason}", task.round),
                    }],
                );
            }
            let refuse = |reason: &str| ClientAction::RefuseTask {
                round: task.round,
                reason: reason.to_string(),
            };
            if state.last_round.is_some_and(|r| task.round <= r) {
                return (state, vec![refuse("stale round")]);
            }
            match state.phase {
                ClientPhase::Training { .. } => vec![refuse("already training")],
                ClientPhase::Registered
                | ClientPhase::WaitingForTask
                | ClientPhase::Uploading { .. } => {
                    state.phase = ClientPhase::Training { round: task.round };
                    state.last_round = Some(task.round);
                    vec![ClientAction::StartLocalTrain(task)]
                }
            }
        }
        ClientEvent::TrainingDone { round, update } => match state.phase {
            ClientPhase::Training { round: r } if r == round && update.update.round == round => {
                state.phase = ClientPhase::Uploading { round };
                vec![ClientAction::Upload(update)]
            }
            _ => Vec::new(),
        },
        ClientEvent::UploadAcked { round } | ClientEvent::UploadFailed { round } => {
            if state.phase == (ClientPhase::Uploading { round }) {
                state.phase = ClientPhase::WaitingForTask;
            }
            Vec::new()
        }
        ClientEvent::Aborted { round } => {
            if matches!(state.phase, ClientPhase::Training { round: r } | ClientPhase::Uploading { round: r } if r == round)
            {
                state.phase = ClientPhase::WaitingForTask;
            }
            Vec::new()
        }
    };
    (state, actions)
}
