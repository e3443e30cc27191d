//! Frame layout (all integers big-endian):
//!
//! ```text
//! +-------+---------+----------+----------+---------+-------+
//! | magic | version | msg_type | length   | payload | crc32 |
//! | 4 B   | 1 B     | 1 B      | 4 B      | length  | 4 B   |
//! +-------+---------+----------+----------+---------+-------+
//! ```
//!
//! `magic` is `FHN1`; the CRC covers the payload only.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FHN1";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
pub const TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("need {needed} more bytes")]
    NeedMoreBytes { needed: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("payload length {0} exceeds limit")]
    TooLarge(usize),
    #[error("checksum mismatch")]
    CorruptFrame,
    #[error("malformed payload: {0}")]
    Payload(String),
}

pub fn encode_frame(msg_type: u8, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg_type);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
    Ok(out)
}

/// A decoded frame borrowing its payload from the input buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodedFrame<'a> {
    pub msg_type: u8,
    pub payload: &'a [u8],
    /// Bytes consumed from the front of the buffer.
    pub consumed: usize,
}

/// Decodes one frame from the front of `buf`. Never reads past the declared
/// length; trailing bytes are left for the next call.
pub fn decode_frame(buf: &[u8]) -> Result<DecodedFrame<'_>, FrameError> {
    if buf.len() < HEADER_LEN {
        // Reject garbage early when the magic prefix already mismatches.
        let n = buf.len().min(4);
        if buf[..n] != MAGIC[..n] {
            return Err(FrameError::BadMagic);
        }
        return Err(FrameError::NeedMoreBytes {
            needed: HEADER_LEN - buf.len(),
        });
    }
    if buf[..4] != MAGIC {
        return Err(FrameError::BadMagic);
    }
    if buf[4] != VERSION {
        return Err(FrameError::BadVersion(buf[4]));
    }
    let msg_type = buf[5];
    let length = u32::from_be_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
    if length > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(length));
    }
    let total = HEADER_LEN + length + TRAILER_LEN;
    if buf.len() < total {
        return Err(FrameError::NeedMoreBytes {
            needed: total - buf.len(),
        });
    }
    let payload = &buf[HEADER_LEN..HEADER_LEN + length];
    let crc = u32::from_be_bytes(
        buf[HEADER_LEN + length..total]
            .try_into()
            .expect("4-byte trailer"),
    );
    if crc32fast::hash(payload) != crc {
        return Err(FrameError::CorruptFrame);
    }
    Ok(DecodedFrame {
        msg_type,
        payload,
        consumed: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_payload_layout() {
        let f = encode_frame(0x01, &[]).unwrap();
        assert_eq!(f.len(), 14);
        assert_eq!(&f[..4], b"FHN1");
        assert_eq!(f[4], 0x01);
        assert_eq!(f[5], 0x01);
        assert_eq!(&f[6..10], &[0, 0, 0, 0]);
        // CRC32 of the empty string is 0
        assert_eq!(&f[10..], &[0, 0, 0, 0]);
    }

    #[test]
    fn known_crc() {
        // CRC32("123456789") = 0xCBF43926
        let f = encode_frame(7, b"123456789").unwrap();
        assert_eq!(&f[f.len() - 4..], &[0xCB, 0xF4, 0x39, 0x26]);
    }

    #[test]
    fn truncated_needs_more() {
        let f = encode_frame(2, b"hello").unwrap();
        for cut in 0..f.len() {
            assert!(matches!(
                decode_frame(&f[..cut]),
                Err(FrameError::NeedMoreBytes { .. })
            ));
        }
    }

    #[test]
    fn header_rejections() {
        let mut f = encode_frame(2, b"x").unwrap();
        f[4] = 2;
        assert_eq!(decode_frame(&f), Err(FrameError::BadVersion(2)));
        f[0] = b'G';
        assert_eq!(decode_frame(&f), Err(FrameError::BadMagic));
        let mut big = encode_frame(2, b"").unwrap();
        big[6..10].copy_from_slice(&(MAX_PAYLOAD as u32 + 1).to_be_bytes());
        assert!(matches!(decode_frame(&big), Err(FrameError::TooLarge(_))));
    }

    #[test]
    fn leaves_trailing_bytes() {
        let mut buf = encode_frame(3, b"ab").unwrap();
        let first = buf.len();
        buf.extend(encode_frame(4, b"cde").unwrap());
        let d = decode_frame(&buf).unwrap();
        assert_eq!((d.msg_type, d.payload, d.consumed), (3, &b"ab"[..], first));
        let d2 = decode_frame(&buf[first..]).unwrap();
        assert_eq!((d2.msg_type, d2.payload), (4, &b"cde"[..]));
    }
}
