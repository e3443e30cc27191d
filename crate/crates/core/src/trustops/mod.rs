//! Provisioning, signatures, audit log and component vetting.

mod audit;
mod components;
mod identity;

pub use audit::{
    audit_verify, load_audit, parse_audit, rfc3339_ms, AuditEntry, AuditEventType, AuditLog, Clock,
    ManualClock, SystemClock, GENESIS_HASH,
};
pub use components::{check_components, Bound, ComponentManifest, JobComponent};
pub use identity::{
    model_digest, provision, sign_model, verify_model, Identity, Role, Roster, RosterSpec,
    StartupKit, SERVER_ID,
};
