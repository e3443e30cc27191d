//! Hash-chained, append-only audit log.
//!
//! `entry_hash = SHA-256(prev_hash || seq || timestamp || event_type || payload_hash)`
//! where every field is concatenated in its textual form (hex hashes, decimal
//! seq, RFC 3339 timestamp, event name). The first entry has `seq = 1` and a
//! `prev_hash` of 64 zeros.
//!
//! On disk each entry is one line of space-separated `key=value` pairs; the
//! optional `payload` comes last as a quoted string.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use sha2::{Digest, Sha256};

use crate::error::{FedError, Result};

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AuditEventType {
    Register,
    TaskAssign,
    UpdateAccepted,
    UpdateLate,
    UpdateRejected,
    RoundAborted,
    ModelSigned,
    PolicyApplied,
    ComponentRejected,
}

impl AuditEventType {
    pub const ALL: [AuditEventType; 9] = [
        AuditEventType::Register,
        AuditEventType::TaskAssign,
        AuditEventType::UpdateAccepted,
        AuditEventType::UpdateLate,
        AuditEventType::UpdateRejected,
        AuditEventType::RoundAborted,
        AuditEventType::ModelSigned,
        AuditEventType::PolicyApplied,
        AuditEventType::ComponentRejected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AuditEventType::Register => "Register",
            AuditEventType::TaskAssign => "TaskAssign",
            AuditEventType::UpdateAccepted => "UpdateAccepted",
            AuditEventType::UpdateLate => "UpdateLate",
            AuditEventType::UpdateRejected => "UpdateRejected",
            AuditEventType::RoundAborted => "RoundAborted",
            AuditEventType::ModelSigned => "ModelSigned",
            AuditEventType::PolicyApplied => "PolicyApplied",
            AuditEventType::ComponentRejected => "ComponentRejected",
        }
    }
}

impl fmt::Display for AuditEventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AuditEventType {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        AuditEventType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| FedError::Config(format!("unknown audit event `{s}`")))
    }
}

/// Source of wall-clock or virtual time, in milliseconds since the epoch.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        Utc::now().timestamp_millis()
    }
}

/// Clock whose time is set explicitly, e.g. from the simulator.
#[derive(Debug, Default)]
pub struct ManualClock {
    ms: AtomicU64,
}

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            ms: AtomicU64::new(start_ms),
        }
    }

    pub fn set(&self, ms: u64) {
        self.ms.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.ms.load(Ordering::SeqCst) as i64
    }
}

pub fn rfc3339_ms(epoch_ms: i64) -> String {
    DateTime::<Utc>::from_timestamp_millis(epoch_ms)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub seq: u64,
    pub timestamp: String,
    pub event_type: AuditEventType,
    pub payload_hash: String,
    pub prev_hash: String,
    pub entry_hash: String,
    /// Event detail; its SHA-256 is `payload_hash`.
    pub payload: Option<String>,
}

impl AuditEntry {
    pub fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prev_hash.as_bytes());
        h.update(self.seq.to_string().as_bytes());
        h.update(self.timestamp.as_bytes());
        h.update(self.event_type.as_str().as_bytes());
        h.update(self.payload_hash.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_line(&self) -> String {
        let mut line = format!(
            "seq={} timestamp={} event_type={} payload_hash={} prev_hash={} entry_hash={}",
            self.seq,
            self.timestamp,
            self.event_type,
            self.payload_hash,
            self.prev_hash,
            self.entry_hash
        );
        if let Some(p) = &self.payload {
            line.push_str(" payload=");
            line.push_str(&quote(p));
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let (fields, payload) = match line.find(" payload=") {
            Some(i) => (&line[..i], Some(unquote(&line[i + " payload=".len()..])?)),
            None => (line, None),
        };
        let mut get = std::collections::BTreeMap::new();
        for pair in fields.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| FedError::Config(format!("audit: bad field `{pair}`")))?;
            if !FIELDS.contains(&k) {
                return Err(FedError::Config(format!("audit: unknown field `{k}`")));
            }
            if get.insert(k, v).is_some() {
                return Err(FedError::Config(format!("audit: repeated field `{k}`")));
            }
        }
        let field = |k: &str| {
            get.get(k)
                .map(|s| s.to_string())
                .ok_or_else(|| FedError::Config(format!("audit: missing `{k}`")))
        };
        Ok(AuditEntry {
            seq: field("seq")?
                .parse()
                .map_err(|_| FedError::Config("audit: seq is not an integer".into()))?,
            timestamp: field("timestamp")?,
            event_type: field("event_type")?.parse()?,
            payload_hash: field("payload_hash")?,
            prev_hash: field("prev_hash")?,
            entry_hash: field("entry_hash")?,
            payload,
        })
    }
}

const FIELDS: [&str; 6] = [
    "seq",
    "timestamp",
    "event_type",
    "payload_hash",
    "prev_hash",
    "entry_hash",
];

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn unquote(s: &str) -> Result<String> {
    let bad = || FedError::Config("audit: malformed payload string".into());
    let inner = s
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .ok_or_else(bad)?;
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next().ok_or_else(bad)? {
                '"' => out.push('"'),
                '\\' => out.push('\\'),
                'n' => out.push('\n'),
                _ => return Err(bad()),
            }
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

/// Single-writer audit log.
pub struct AuditLog {
    entries: Vec<AuditEntry>,
    clock: Arc<dyn Clock>,
}

impl AuditLog {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            entries: Vec::new(),
            clock,
        }
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn append(&mut self, event_type: AuditEventType, payload: &str) -> &AuditEntry {
        let (seq, prev_hash) = match self.entries.last() {
            Some(last) => (last.seq + 1, last.entry_hash.clone()),
            None => (1, GENESIS_HASH.to_string()),
        };
        let mut entry = AuditEntry {
            seq,
            timestamp: rfc3339_ms(self.clock.now_ms()),
            event_type,
            payload_hash: sha256_hex(payload.as_bytes()),
            prev_hash,
            entry_hash: String::new(),
            payload: Some(payload.to_string()),
        };
        entry.entry_hash = entry.compute_hash();
        self.entries.push(entry);
        self.entries.last().expect("just pushed")
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| FedError::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| FedError::io(path, e))
    }
}

pub fn parse_audit(text: &str) -> Result<Vec<AuditEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(AuditEntry::parse_line)
        .collect()
}

pub fn load_audit(path: &Path) -> Result<Vec<AuditEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    parse_audit(&text)
}

/// Recomputes the whole chain. Returns the seq of the first entry that breaks
/// it (bad sequence number, broken link, wrong hash, or a payload that does
/// not match its hash). For a sequence gap the expected seq is reported.
pub fn audit_verify(entries: &[AuditEntry]) -> std::result::Result<(), u64> {
    let mut prev = GENESIS_HASH.to_string();
    for (i, e) in entries.iter().enumerate() {
        let expected_seq = i as u64 + 1;
        if e.seq != expected_seq {
            return Err(expected_seq);
        }
        let payload_ok = e
            .payload
            .as_ref()
            .is_none_or(|p| sha256_hex(p.as_bytes()) == e.payload_hash);
        if e.prev_hash != prev || e.compute_hash() != e.entry_hash || !payload_ok {
            return Err(e.seq);
        }
        prev = e.entry_hash.clone();
    }
    Ok(())
}
