//! Framing, reliable delivery, and the two network backends.

mod frame;
mod reliable;
pub mod sim;
pub mod tcp;
mod wire;

pub use frame::{
    decode_frame, encode_frame, DecodedFrame, FrameError, HEADER_LEN, MAGIC, MAX_PAYLOAD,
    TRAILER_LEN, VERSION,
};
pub use reliable::{reliable_send, Deduplicator, DeliveryReceipt, Link, RetryPolicy};
pub use sim::{NetEvent, PartitionWindow, SimNetConfig, SimNetwork, TraceEntry, TraceKind};
pub use wire::{decode_envelope, decode_payload, encode_envelope, encode_payload, MsgType};
