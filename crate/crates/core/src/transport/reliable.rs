//! Acknowledged delivery with exponential backoff and receiver-side dedup.

use std::collections::{HashSet, VecDeque};
use std::io;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::encode_envelope;
use crate::error::{FedError, Result};
use crate::protocol::{Envelope, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            backoff_base_ms: 50,
        }
    }
}

impl RetryPolicy {
    /// Wait after transmission number `attempt` (0-based): `base * 2^attempt`.
    pub fn backoff_ms(&self, attempt: u32) -> u64 {
        self.backoff_base_ms.saturating_mul(1u64 << attempt.min(32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryReceipt {
    pub seq: u64,
    /// Transmissions made, counting the successful one.
    pub attempts: u32,
}

/// Point-to-point carrier for encoded frames.
pub trait Link {
    fn transmit(&mut self, frame: &[u8]) -> io::Result<()>;
    /// Next envelope, or `None` when `timeout` passes without one.
    fn receive(&mut self, timeout: Duration) -> Result<Option<Envelope>>;
}

/// Sends `env` and waits for an `Ack` carrying its sequence number,
/// retransmitting up to `policy.max_retries` times. Anything else received
/// while waiting is pushed to `inbox` in arrival order.
pub fn reliable_send<L: Link + ?Sized>(
    link: &mut L,
    env: &Envelope,
    policy: RetryPolicy,
    inbox: &mut VecDeque<Envelope>,
) -> Result<DeliveryReceipt> {
    let frame = encode_envelope(env)?;
    for attempt in 0..=policy.max_retries {
        link.transmit(&frame)?;
        let wait = Duration::from_millis(policy.backoff_ms(attempt));
        let deadline = std::time::Instant::now() + wait;
        loop {
            let now = std::time::Instant::now();
            if now >= deadline {
                break;
            }
            match link.receive(deadline - now)? {
                Some(Envelope {
                    message: Message::Ack { ack_seq },
                    ..
                }) if ack_seq == env.seq => {
                    return Ok(DeliveryReceipt {
                        seq: env.seq,
                        attempts: attempt + 1,
                    })
                }
                // stale acks for earlier messages
                Some(Envelope {
                    message: Message::Ack { .. },
                    ..
                }) => {}
                Some(other) => inbox.push_back(other),
                None => break,
            }
        }
    }
    Err(FedError::DeliveryFailed {
        to: "peer".into(),
        attempts: policy.max_retries + 1,
    })
}

/// Receiver-side at-most-once filter keyed by `(sender, seq)`.
#[derive(Debug, Default, Clone)]
pub struct Deduplicator {
    seen: HashSet<(String, u64)>,
}

impl Deduplicator {
    /// True the first time a `(sender, seq)` pair is offered.
    pub fn first_time(&mut self, sender: &str, seq: u64) -> bool {
        self.seen.insert((sender.to_string(), seq))
    }
}
