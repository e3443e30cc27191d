//! Rebuilds the round history from a server audit log.

use std::collections::BTreeMap;

use super::plan::{split_ids, RoundRecord};
use crate::error::{FedError, Result};
use crate::trustops::{AuditEntry, AuditEventType};

fn fields(payload: &str) -> BTreeMap<&str, &str> {
    payload
        .split(' ')
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

fn field<'a>(f: &BTreeMap<&str, &'a str>, key: &str, seq: u64) -> Result<&'a str> {
    f.get(key)
        .copied()
        .ok_or_else(|| FedError::Protocol(format!("audit entry {seq}: missing `{key}`")))
}

fn num<T: std::str::FromStr>(f: &BTreeMap<&str, &str>, key: &str, seq: u64) -> Result<T> {
    field(f, key, seq)?
        .parse()
        .map_err(|_| FedError::Protocol(format!("audit entry {seq}: bad `{key}`")))
}

pub fn replay_history(entries: &[AuditEntry]) -> Result<Vec<RoundRecord>> {
    let mut open: BTreeMap<u64, RoundRecord> = BTreeMap::new();
    let mut done: Vec<RoundRecord> = Vec::new();
    for e in entries {
        let Some(payload) = e.payload.as_deref() else {
            continue;
        };
        let f = fields(payload);
        match e.event_type {
            AuditEventType::TaskAssign => {
                let round = num(&f, "round", e.seq)?;
                open.insert(
                    round,
                    RoundRecord {
                        round,
                        invited: split_ids(field(&f, "invited", e.seq)?),
                        responded: Default::default(),
                        late_discarded: Default::default(),
                        strategy: String::new(),
                        aggregate_norm: 0.0,
                        duration_ms: 0,
                        aborted: false,
                    },
                );
            }
            AuditEventType::ModelSigned | AuditEventType::RoundAborted => {
                let round: u64 = num(&f, "round", e.seq)?;
                let mut rec = open.remove(&round).ok_or_else(|| {
                    FedError::Protocol(format!(
                        "audit entry {}: round {round} never assigned",
                        e.seq
                    ))
                })?;
                rec.strategy = field(&f, "strategy", e.seq)?.to_string();
                rec.duration_ms = num(&f, "duration_ms", e.seq)?;
                if e.event_type == AuditEventType::ModelSigned {
                    rec.responded = split_ids(field(&f, "responded", e.seq)?);
                    rec.aggregate_norm = num(&f, "norm", e.seq)?;
                } else {
                    rec.responded = split_ids(field(&f, "received", e.seq)?);
                    rec.aborted = true;
                }
                done.push(rec);
            }
            AuditEventType::UpdateLate => {
                let round: u64 = num(&f, "round", e.seq)?;
                let client = field(&f, "client", e.seq)?.to_string();
                if let Some(rec) = done.iter_mut().find(|r| r.round == round) {
                    rec.late_discarded.insert(client);
                }
            }
            _ => {}
        }
    }
    Ok(done)
}
