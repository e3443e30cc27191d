//! Blocking TCP carrier for the same frames the simulator uses.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use super::frame::FrameError;
use super::reliable::Link;
use super::wire::{decode_envelope, encode_envelope};
use crate::error::{FedError, Result};
use crate::protocol::Envelope;

pub const DEFAULT_PORT: u16 = 7761;
pub const BIND_ENV: &str = "FEDMESH_BIND";

/// Bind address: `$FEDMESH_BIND` if set, else `0.0.0.0:7761`.
pub fn bind_address() -> String {
    std::env::var(BIND_ENV).unwrap_or_else(|_| format!("0.0.0.0:{DEFAULT_PORT}"))
}

/// Accumulates stream bytes and yields whole envelopes.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    /// Pops a complete envelope from the buffer if one is available.
    pub fn try_pop(&mut self) -> Result<Option<Envelope>> {
        match decode_envelope(&self.buf) {
            Ok((env, used)) => {
                self.buf.drain(..used);
                Ok(Some(env))
            }
            Err(FrameError::NeedMoreBytes { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Reads until one envelope is complete. `Ok(None)` on timeout.
    pub fn read_envelope(&mut self, stream: &mut TcpStream) -> Result<Option<Envelope>> {
        loop {
            if let Some(env) = self.try_pop()? {
                return Ok(Some(env));
            }
            let mut chunk = [0u8; 64 * 1024];
            match stream.read(&mut chunk) {
                Ok(0) => {
                    return Err(FedError::Net(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "connection closed",
                    )))
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    return Ok(None)
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub fn write_envelope(stream: &mut TcpStream, env: &Envelope) -> Result<()> {
    let frame = encode_envelope(env)?;
    stream.write_all(&frame)?;
    Ok(())
}

/// Client-side link over one connection.
pub struct TcpLink {
    stream: TcpStream,
    reader: FrameReader,
}

impl TcpLink {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            reader: FrameReader::default(),
        })
    }

    pub fn from_stream(stream: TcpStream) -> Self {
        Self {
            stream,
            reader: FrameReader::default(),
        }
    }

    pub fn send(&mut self, env: &Envelope) -> Result<()> {
        write_envelope(&mut self.stream, env)
    }

    /// Blocks until an envelope arrives or `timeout` passes.
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Envelope>> {
        if let Some(env) = self.reader.try_pop()? {
            return Ok(Some(env));
        }
        self.stream
            .set_read_timeout(timeout.map(|t| t.max(Duration::from_millis(1))))?;
        self.reader.read_envelope(&mut self.stream)
    }
}

impl Link for TcpLink {
    fn transmit(&mut self, frame: &[u8]) -> io::Result<()> {
        self.stream.write_all(frame)
    }

    fn receive(&mut self, timeout: Duration) -> Result<Option<Envelope>> {
        self.recv(Some(timeout))
    }
}
