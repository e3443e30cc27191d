//! Round orchestration: message types, pure server/client state machines and
//! the runtimes that drive them.

mod client;
mod eval;
mod messages;
mod node;
mod plan;
mod replay;
mod server;
mod sim_run;
pub mod tcp_run;

pub use client::{client_step, ClientAction, ClientEvent, ClientPhase, ClientState, Task};
pub use eval::{cross_site_evaluate, pooled_counts, SiteEval};
pub use messages::{register_digest, Envelope, Message, SignedUpdate, SubmittedUpdate, UpdateBody};
pub use node::{
    aggregate_round, audit_policies, Behavior, ClientNode, FederationSpec, Outgoing, RoundOutcome,
    ServerNode, ServerOutput, Site, REGISTRATION_REFUSED,
};
pub use plan::{plan_round, RoundPlan, RoundRecord};
pub use replay::replay_history;
pub use server::{server_step, ServerAction, ServerEvent, ServerPhase, ServerState};
pub use sim_run::{
    plan_rng, run_federation, run_federation_with_kits, sim_kits, FederationOutcome,
};
