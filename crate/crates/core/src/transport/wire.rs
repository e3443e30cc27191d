//! Message <-> frame payload encoding.
//!
//! Payload = `u32be header_len | header | [u32be count | count * 8 bytes]`.
//! The header is a TOML document; the optional tail carries a parameter
//! vector as little-endian f64 words (or u64 ring words for masked updates).

use serde::{Deserialize, Serialize};

use super::frame::{decode_frame, encode_frame, FrameError};
use crate::model::{Counts, ParameterVector};
use crate::privacy::RingVector;
use crate::protocol::{Envelope, Message, SignedUpdate, SubmittedUpdate, UpdateBody};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Register = 0x01,
    TaskAssign = 0x02,
    UpdateSubmit = 0x03,
    Ack = 0x04,
    Abort = 0x05,
    EvalRequest = 0x06,
    EvalReport = 0x07,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Option<Self> {
        use MsgType::*;
        Some(match b {
            0x01 => Register,
            0x02 => TaskAssign,
            0x03 => UpdateSubmit,
            0x04 => Ack,
            0x05 => Abort,
            0x06 => EvalRequest,
            0x07 => EvalReport,
            _ => return None,
        })
    }

    pub fn of(message: &Message) -> Self {
        match message {
            Message::Register { .. } => MsgType::Register,
            Message::TaskAssign { .. } => MsgType::TaskAssign,
            Message::UpdateSubmit(_) => MsgType::UpdateSubmit,
            Message::Ack { .. } => MsgType::Ack,
            Message::Abort { .. } => MsgType::Abort,
            Message::EvalRequest { .. } => MsgType::EvalRequest,
            Message::EvalReport { .. } => MsgType::EvalReport,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    seq: u64,
    sender: String,
    body: HeaderBody,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum HeaderBody {
    Register {
        site_id: String,
        nonce: String,
        signature: String,
    },
    TaskAssign {
        round: u64,
        cohort: Vec<String>,
        masked: bool,
        signature: String,
    },
    UpdateSubmit {
        client_id: String,
        round: u64,
        weight: f64,
        masked: bool,
        signature: String,
    },
    Ack {
        ack_seq: u64,
    },
    Abort {
        round: u64,
        reason: String,
    },
    EvalRequest {
        signature: String,
    },
    EvalReport {
        site_id: String,
        sentences: u64,
        entity: Vec<u64>,
        token: Vec<u64>,
    },
}

fn bad(msg: impl Into<String>) -> FrameError {
    FrameError::Payload(msg.into())
}

fn push_words(out: &mut Vec<u8>, words: impl ExactSizeIterator<Item = [u8; 8]>) {
    out.extend_from_slice(&(words.len() as u32).to_be_bytes());
    for w in words {
        out.extend_from_slice(&w);
    }
}

fn read_words(tail: &[u8]) -> Result<Vec<[u8; 8]>, FrameError> {
    if tail.len() < 4 {
        return Err(bad("missing vector count"));
    }
    let count = u32::from_be_bytes(tail[..4].try_into().expect("4 bytes")) as usize;
    let body = &tail[4..];
    if body.len() != count * 8 {
        return Err(bad(format!(
            "vector count {count} does not match {} trailing bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| c.try_into().expect("8-byte chunk"))
        .collect())
}

fn read_params(tail: &[u8]) -> Result<ParameterVector, FrameError> {
    let values = read_words(tail)?
        .into_iter()
        .map(f64::from_le_bytes)
        .collect();
    ParameterVector::from_vec(values).map_err(|e| bad(e.to_string()))
}

fn unhex(s: &str) -> Result<Vec<u8>, FrameError> {
    hex::decode(s).map_err(|_| bad("invalid hex field"))
}

pub fn encode_payload(env: &Envelope) -> Vec<u8> {
    let mut tail = Vec::new();
    let body = match &env.message {
        Message::Register {
            site_id,
            nonce,
            signature,
        } => HeaderBody::Register {
            site_id: site_id.clone(),
            nonce: hex::encode(nonce),
            signature: hex::encode(signature),
        },
        Message::TaskAssign {
            round,
            cohort,
            masked,
            global,
            signature,
        } => {
            push_words(&mut tail, global.as_slice().iter().map(|v| v.to_le_bytes()));
            HeaderBody::TaskAssign {
                round: *round,
                cohort: cohort.clone(),
                masked: *masked,
                signature: hex::encode(signature),
            }
        }
        Message::UpdateSubmit(SignedUpdate { update, signature }) => {
            let masked = match &update.body {
                UpdateBody::Plain(p) => {
                    push_words(&mut tail, p.as_slice().iter().map(|v| v.to_le_bytes()));
                    false
                }
                UpdateBody::Masked(r) => {
                    push_words(&mut tail, r.0.iter().map(|v| v.to_le_bytes()));
                    true
                }
            };
            HeaderBody::UpdateSubmit {
                client_id: update.client_id.clone(),
                round: update.round,
                weight: update.weight,
                masked,
                signature: hex::encode(signature),
            }
        }
        Message::Ack { ack_seq } => HeaderBody::Ack { ack_seq: *ack_seq },
        Message::Abort { round, reason } => HeaderBody::Abort {
            round: *round,
            reason: reason.clone(),
        },
        Message::EvalRequest { params, signature } => {
            push_words(&mut tail, params.as_slice().iter().map(|v| v.to_le_bytes()));
            HeaderBody::EvalRequest {
                signature: hex::encode(signature),
            }
        }
        Message::EvalReport {
            site_id,
            sentences,
            counts,
        } => HeaderBody::EvalReport {
            site_id: site_id.clone(),
            sentences: *sentences,
            entity: counts.entity.to_vec(),
            token: counts.token.to_vec(),
        },
    };
    let header = Header {
        seq: env.seq,
        sender: env.sender.clone(),
        body,
    };
    let text = toml::to_string(&header).expect("wire header serializes");
    let mut out = Vec::with_capacity(4 + text.len() + tail.len());
    out.extend_from_slice(&(text.len() as u32).to_be_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&tail);
    out
}

pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Envelope, FrameError> {
    let kind = MsgType::from_u8(msg_type)
        .ok_or_else(|| bad(format!("unknown message type {msg_type:#04x}")))?;
    if payload.len() < 4 {
        return Err(bad("missing header length"));
    }
    let hlen = u32::from_be_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
    if payload.len() < 4 + hlen {
        return Err(bad("header length exceeds payload"));
    }
    let text =
        std::str::from_utf8(&payload[4..4 + hlen]).map_err(|_| bad("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
    let tail = &payload[4 + hlen..];
    let no_tail = |m: Message| {
        if tail.is_empty() {
            Ok(m)
        } else {
            Err(bad("unexpected vector section"))
        }
    };

    let message = match header.body {
        HeaderBody::Register {
            site_id,
            nonce,
            signature,
        } => no_tail(Message::Register {
            site_id,
            nonce: unhex(&nonce)?,
            signature: unhex(&signature)?,
        })?,
        HeaderBody::TaskAssign {
            round,
            cohort,
            masked,
            signature,
        } => Message::TaskAssign {
            round,
            cohort,
            masked,
            global: read_params(tail)?,
            signature: unhex(&signature)?,
        },
        HeaderBody::UpdateSubmit {
            client_id,
            round,
            weight,
            masked,
            signature,
        } => {
            let body = if masked {
                let words = read_words(tail)?;
                UpdateBody::Masked(RingVector(
                    words.into_iter().map(u64::from_le_bytes).collect(),
                ))
            } else {
                UpdateBody::Plain(read_params(tail)?)
            };
            Message::UpdateSubmit(SignedUpdate {
                update: SubmittedUpdate {
                    client_id,
                    round,
                    weight,
                    body,
                },
                signature: unhex(&signature)?,
            })
        }
        HeaderBody::Ack { ack_seq } => no_tail(Message::Ack { ack_seq })?,
        HeaderBody::Abort { round, reason } => no_tail(Message::Abort { round, reason })?,
        HeaderBody::EvalRequest { signature } => Message::EvalRequest {
            params: read_params(tail)?,
            signature: unhex(&signature)?,
        },
        HeaderBody::EvalReport {
            site_id,
            sentences,
            entity,
            token,
        } => {
            let triple = |v: Vec<u64>| -> Result<[u64; 3], FrameError> {
                v.try_into().map_err(|_| bad("counts must have 3 entries"))
            };
            no_tail(Message::EvalReport {
                site_id,
                sentences,
                counts: Counts {
                    entity: triple(entity)?,
                    token: triple(token)?,
                },
            })?
        }
    };
    if MsgType::of(&message) != kind {
        return Err(bad("frame type does not match header kind"));
    }
    Ok(Envelope {
        seq: header.seq,
        sender: header.sender,
        message,
    })
}

pub fn encode_envelope(env: &Envelope) -> Result<Vec<u8>, FrameError> {
    encode_frame(MsgType::of(&env.message) as u8, &encode_payload(env))
}

/// Decodes one envelope from the front of `buf`, returning it with the number
/// of bytes consumed.
pub fn decode_envelope(buf: &[u8]) -> Result<(Envelope, usize), FrameError> {
    let frame = decode_frame(buf)?;
    Ok((
        decode_payload(frame.msg_type, frame.payload)?,
        frame.consumed,
    ))
}
