//! Seeded discrete-event network with a virtual millisecond clock.
//!
//! Every transmission draws one uniform sample for the drop decision and one
//! for latency, in that order, from a single ChaCha8 stream. Events are
//! ordered by `(virtual time, insertion sequence)`, so a seed fixes the whole
//! trace.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reliable::{Deduplicator, RetryPolicy};
use super::wire::{decode_envelope, encode_envelope};
use crate::error::{FedError, Result};
use crate::protocol::{Envelope, Message};

/// Directed link outage over `[start_ms, end_ms)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionWindow {
    pub from: String,
    pub to: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimNetConfig {
    pub latency_ms: (u64, u64),
    pub drop_prob: f64,
    pub seed: u64,
    pub partitions: Vec<PartitionWindow>,
    pub retry: RetryPolicy,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        Self {
            latency_ms: (1, 10),
            drop_prob: 0.0,
            seed: 0,
            partitions: Vec::new(),
            retry: RetryPolicy::default(),
        }
    }
}

impl SimNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latency_ms.0 > self.latency_ms.1 {
            return Err(FedError::Config("sim: latency min exceeds max".into()));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(FedError::Config("sim: drop_prob must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Sent,
    Dropped,
    Delivered,
    Duplicate,
    AckSent,
    AckDropped,
    Acked,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceEntry {
    pub time_ms: u64,
    pub kind: TraceKind,
    pub from: String,
    pub to: String,
    pub seq: u64,
    /// 1-based transmission number.
    pub attempt: u32,
}

/// What the fabric hands back to the application.
#[derive(Debug, Clone, PartialEq)]
pub enum NetEvent {
    Delivered {
        to: String,
        envelope: Envelope,
    },
    Acked {
        from: String,
        to: String,
        seq: u64,
        attempts: u32,
    },
    Failed {
        from: String,
        to: String,
        seq: u64,
        attempts: u32,
    },
    Timer {
        node: String,
        token: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Internal {
    Arrive {
        from: String,
        to: String,
        seq: u64,
        attempt: u32,
        bytes: Vec<u8>,
    },
    AckArrive {
        from: String,
        to: String,
        seq: u64,
        attempt: u32,
    },
    RetryCheck {
        from: String,
        seq: u64,
        attempt: u32,
    },
    Timer {
        node: String,
        token: u64,
    },
}

#[derive(Debug, PartialEq, Eq)]
struct Scheduled {
    time: u64,
    order: u64,
    event: Internal,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.order).cmp(&(other.time, other.order))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct Pending {
    to: String,
    bytes: Vec<u8>,
}

pub struct SimNetwork {
    config: SimNetConfig,
    clock: u64,
    order: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    rng: ChaCha8Rng,
    next_seq: BTreeMap<String, u64>,
    pending: HashMap<(String, u64), Pending>,
    dedup: HashMap<String, Deduplicator>,
    trace: Vec<TraceEntry>,
}

impl SimNetwork {
    pub fn new(config: SimNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            clock: 0,
            order: 0,
            queue: BinaryHeap::new(),
            next_seq: BTreeMap::new(),
            pending: HashMap::new(),
            dedup: HashMap::new(),
            trace: Vec::new(),
        })
    }

    pub fn now_ms(&self) -> u64 {
        self.clock
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn config(&self) -> &SimNetConfig {
        &self.config
    }

    fn schedule(&mut self, at: u64, event: Internal) {
        self.order += 1;
        self.queue.push(Reverse(Scheduled {
            time: at,
            order: self.order,
            event,
        }));
    }

    fn partitioned(&self, from: &str, to: &str) -> bool {
        self.config.partitions.iter().any(|w| {
            w.from == from && w.to == to && self.clock >= w.start_ms && self.clock < w.end_ms
        })
    }

    /// One transmission: returns the arrival time, or `None` when lost.
    fn transmit(&mut self, from: &str, to: &str) -> Option<u64> {
        let roll: f64 = self.rng.gen();
        let (lo, hi) = self.config.latency_ms;
        let latency = self.rng.gen_range(lo..=hi);
        if roll < self.config.drop_prob || self.partitioned(from, to) {
            None
        } else {
            Some(self.clock + latency)
        }
    }

    fn record(&mut self, kind: TraceKind, from: &str, to: &str, seq: u64, attempt: u32) {
        self.trace.push(TraceEntry {
            time_ms: self.clock,
            kind,
            from: from.to_string(),
            to: to.to_string(),
            seq,
            attempt,
        });
    }

    fn send_attempt(&mut self, from: &str, seq: u64, attempt: u32) {
        let Some(p) = self.pending.get(&(from.to_string(), seq)) else {
            return;
        };
        let (to, bytes) = (p.to.clone(), p.bytes.clone());
        match self.transmit(from, &to) {
            Some(at) => {
                self.record(TraceKind::Sent, from, &to, seq, attempt);
                self.schedule(
                    at,
                    Internal::Arrive {
                        from: from.to_string(),
                        to,
                        seq,
                        attempt,
                        bytes,
                    },
                );
            }
            None => self.record(TraceKind::Dropped, from, &to, seq, attempt),
        }
        let wait = self.config.retry.backoff_ms(attempt - 1);
        self.schedule(
            self.clock + wait,
            Internal::RetryCheck {
                from: from.to_string(),
                seq,
                attempt,
            },
        );
    }

    /// Queues `message` from `from` to `to` for reliable delivery and returns
    /// the sequence number assigned to it.
    pub fn send(&mut self, from: &str, to: &str, message: Message) -> Result<u64> {
        let seq = {
            let s = self.next_seq.entry(from.to_string()).or_insert(0);
            *s += 1;
            *s
        };
        let env = Envelope {
            seq,
            sender: from.to_string(),
            message,
        };
        let bytes = encode_envelope(&env)?;
        self.pending.insert(
            (from.to_string(), seq),
            Pending {
                to: to.to_string(),
                bytes,
            },
        );
        self.send_attempt(from, seq, 1);
        Ok(seq)
    }

    /// Injects an already-encoded frame once, outside the retry machinery.
    /// Used to exercise duplicate suppression.
    pub fn inject_raw(&mut self, from: &str, to: &str, seq: u64, bytes: Vec<u8>, delay_ms: u64) {
        self.schedule(
            self.clock + delay_ms,
            Internal::Arrive {
                from: from.to_string(),
                to: to.to_string(),
                seq,
                attempt: 1,
                bytes,
            },
        );
    }

    pub fn set_timer(&mut self, node: &str, delay_ms: u64, token: u64) {
        self.schedule(
            self.clock + delay_ms,
            Internal::Timer {
                node: node.to_string(),
                token,
            },
        );
    }

    /// Advances virtual time to the next application-visible event.
    pub fn next_event(&mut self) -> Option<NetEvent> {
        while let Some(Reverse(item)) = self.queue.pop() {
            self.clock = item.time;
            match item.event {
                Internal::Timer { node, token } => return Some(NetEvent::Timer { node, token }),
                Internal::Arrive {
                    from,
                    to,
                    seq,
                    attempt,
                    bytes,
                } => {
                    let Ok((envelope, _)) = decode_envelope(&bytes) else {
                        continue;
                    };
                    // Ack every arrival, including duplicates.
                    match self.transmit(&to, &from) {
                        Some(at) => {
                            self.record(TraceKind::AckSent, &to, &from, seq, attempt);
                            self.schedule(
                                at,
                                Internal::AckArrive {
                                    from: from.clone(),
                                    to: to.clone(),
                                    seq,
                                    attempt,
                                },
                            );
                        }
                        None => self.record(TraceKind::AckDropped, &to, &from, seq, attempt),
                    }
                    let fresh = self
                        .dedup
                        .entry(to.clone())
                        .or_default()
                        .first_time(&from, seq);
                    if fresh {
                        self.record(TraceKind::Delivered, &from, &to, seq, attempt);
                        return Some(NetEvent::Delivered { to, envelope });
                    }
                    self.record(TraceKind::Duplicate, &from, &to, seq, attempt);
                }
                Internal::AckArrive {
                    from,
                    to,
                    seq,
                    attempt,
                } => {
                    if self.pending.remove(&(from.clone(), seq)).is_some() {
                        self.record(TraceKind::Acked, &from, &to, seq, attempt);
                        return Some(NetEvent::Acked {
                            from,
                            to,
                            seq,
                            attempts: attempt,
                        });
                    }
                }
                Internal::RetryCheck { from, seq, attempt } => {
                    let key = (from.clone(), seq);
                    if !self.pending.contains_key(&key) {
                        continue;
                    }
                    if attempt <= self.config.retry.max_retries {
                        self.send_attempt(&from, seq, attempt + 1);
                    } else {
                        let p = self.pending.remove(&key).expect("checked above");
                        self.record(TraceKind::Failed, &from, &p.to, seq, attempt);
                        return Some(NetEvent::Failed {
                            from,
                            to: p.to,
                            seq,
                            attempts: attempt,
                        });
                    }
                }
            }
        }
        None
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Drops all queued timers for `node` whose token satisfies `pred`.
    pub fn cancel_timers(&mut self, node: &str, pred: impl Fn(u64) -> bool) {
        let items: Vec<_> = std::mem::take(&mut self.queue).into_vec();
        self.queue = items
            .into_iter()
            .filter(|Reverse(s)| !matches!(&s.event, Internal::Timer { node: n, token } if n == node && pred(*token)))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ping() -> Message {
        Message::Abort {
            round: 0,
            reason: "ping".into(),
        }
    }

    fn drain(net: &mut SimNetwork) -> Vec<NetEvent> {
        std::iter::from_fn(|| net.next_event()).collect()
    }

    #[test]
    fn lossless_single_transmission() {
        let mut net = SimNetwork::new(SimNetConfig::default()).unwrap();
        net.send("a", "b", ping()).unwrap();
        let events = drain(&mut net);
        assert!(matches!(events[0], NetEvent::Delivered { .. }));
        assert!(matches!(events[1], NetEvent::Acked { attempts: 1, .. }));
        let sent = net
            .trace()
            .iter()
            .filter(|t| t.kind == TraceKind::Sent)
            .count();
        assert_eq!(sent, 1);
    }

    #[test]
    fn fixed_latency() {
        let cfg = SimNetConfig {
            latency_ms: (5, 5),
            ..SimNetConfig::default()
        };
        let mut net = SimNetwork::new(cfg).unwrap();
        net.send("a", "b", ping()).unwrap();
        net.send("b", "a", ping()).unwrap();
        drain(&mut net);
        for t in net.trace() {
            if t.kind == TraceKind::Delivered || t.kind == TraceKind::Acked {
                assert_eq!(t.time_ms % 5, 0);
            }
        }
        let delivered: Vec<_> = net
            .trace()
            .iter()
            .filter(|t| t.kind == TraceKind::Delivered)
            .map(|t| t.time_ms)
            .collect();
        assert_eq!(delivered, vec![5, 5]);
    }

    #[test]
    fn partition_fails_delivery() {
        let cfg = SimNetConfig {
            partitions: vec![PartitionWindow {
                from: "a".into(),
                to: "b".into(),
                start_ms: 0,
                end_ms: 1_000_000,
            }],
            ..SimNetConfig::default()
        };
        let mut net = SimNetwork::new(cfg).unwrap();
        net.send("a", "b", ping()).unwrap();
        net.send("b", "a", ping()).unwrap();
        let events = drain(&mut net);
        assert!(events
            .iter()
            .any(|e| matches!(e, NetEvent::Failed { from, attempts: 6, .. } if from == "a")));
        assert!(events
            .iter()
            .any(|e| matches!(e, NetEvent::Delivered { to, .. } if to == "a")));
    }

    #[test]
    fn duplicate_processed_once() {
        let mut net = SimNetwork::new(SimNetConfig::default()).unwrap();
        let env = Envelope {
            seq: 7,
            sender: "a".into(),
            message: ping(),
        };
        let bytes = encode_envelope(&env).unwrap();
        net.inject_raw("a", "b", 7, bytes.clone(), 1);
        net.inject_raw("a", "b", 7, bytes, 2);
        let delivered = drain(&mut net)
            .into_iter()
            .filter(|e| matches!(e, NetEvent::Delivered { .. }))
            .count();
        assert_eq!(delivered, 1);
        assert!(net.trace().iter().any(|t| t.kind == TraceKind::Duplicate));
    }

    #[test]
    fn invalid_config() {
        let cfg = SimNetConfig {
            latency_ms: (5, 1),
            ..SimNetConfig::default()
        };
        assert!(SimNetwork::new(cfg).is_err());
        let cfg = SimNetConfig {
            drop_prob: 1.0,
            ..SimNetConfig::default()
        };
        assert!(SimNetwork::new(cfg).is_err());
    }
}
