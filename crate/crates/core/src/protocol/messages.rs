//! Messages exchanged between server and sites.

use sha2::{Digest, Sha256};

use crate::aggregation::ClientUpdate;
use crate::model::{Counts, ParameterVector};
use crate::privacy::RingVector;

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateBody {
    Plain(ParameterVector),
    /// Fixed-point `weight * delta` plus the client's pairwise mask.
    Masked(RingVector),
}

impl UpdateBody {
    pub fn dims(&self) -> usize {
        match self {
            UpdateBody::Plain(p) => p.dims(),
            UpdateBody::Masked(r) => r.dims(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmittedUpdate {
    pub client_id: String,
    pub round: u64,
    pub weight: f64,
    pub body: UpdateBody,
}

impl SubmittedUpdate {
    /// SHA-256 over a canonical serialization; this is what gets signed.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"fedmesh/update/v1");
        h.update((self.client_id.len() as u32).to_be_bytes());
        h.update(self.client_id.as_bytes());
        h.update(self.round.to_be_bytes());
        h.update(self.weight.to_bits().to_be_bytes());
        match &self.body {
            UpdateBody::Plain(p) => {
                h.update([0u8]);
                h.update((p.dims() as u64).to_be_bytes());
                for v in p.as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
            UpdateBody::Masked(r) => {
                h.update([1u8]);
                h.update((r.dims() as u64).to_be_bytes());
                for v in &r.0 {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    pub fn into_client_update(self) -> Option<ClientUpdate> {
        match self.body {
            UpdateBody::Plain(delta) => Some(ClientUpdate {
                client_id: self.client_id,
                round: self.round,
                weight: self.weight,
                delta,
            }),
            UpdateBody::Masked(_) => None,
        }
    }
}

/// An update together with its sender's signature.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedUpdate {
    pub update: SubmittedUpdate,
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register {
        site_id: String,
        nonce: Vec<u8>,
        signature: Vec<u8>,
    },
    TaskAssign {
        round: u64,
        /// Invited cohort; masked rounds derive pair seeds over it.
        cohort: Vec<String>,
        masked: bool,
        global: ParameterVector,
        /// Server signature over the global model.
        signature: Vec<u8>,
    },
    UpdateSubmit(SignedUpdate),
    Ack {
        ack_seq: u64,
    },
    Abort {
        round: u64,
        reason: String,
    },
    EvalRequest {
        params: ParameterVector,
        signature: Vec<u8>,
    },
    EvalReport {
        site_id: String,
        sentences: u64,
        counts: Counts,
    },
}

/// A message with the sender's identity and per-sender sequence number, the
/// key receivers use to suppress duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub seq: u64,
    pub sender: String,
    pub message: Message,
}

/// Bytes a site signs when registering.
pub fn register_digest(site_id: &str, nonce: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"fedmesh/register/v1");
    h.update((site_id.len() as u32).to_be_bytes());
    h.update(site_id.as_bytes());
    h.update(nonce);
    h.finalize().into()
}
