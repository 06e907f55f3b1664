//! Blocking packet framing over a TCP stream.

use std::io::{self, ErrorKind, Read};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use crate::codec::{decode_packet_with, CodecLimits, DecodeOutcome, Packet, ProtocolError};

/// Read timeout used so blocked readers can notice shutdown.
pub(crate) const POLL_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Debug)]
pub(crate) enum ReadError {
    Closed,
    Timeout,
    Stopped,
    Io(io::Error),
    Protocol(ProtocolError),
}

impl std::fmt::Display for ReadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReadError::Closed => f.write_str("connection closed"),
            ReadError::Timeout => f.write_str("timed out"),
            ReadError::Stopped => f.write_str("stopped"),
            ReadError::Io(e) => write!(f, "io: {e}"),
            ReadError::Protocol(e) => write!(f, "protocol error: {e}"),
        }
    }
}

pub(crate) struct PacketReader {
    stream: TcpStream,
    buf: Vec<u8>,
    limits: CodecLimits,
}

impl PacketReader {
    pub fn new(stream: TcpStream, limits: CodecLimits) -> io::Result<Self> {
        stream.set_read_timeout(Some(POLL_INTERVAL))?;
        Ok(PacketReader {
            stream,
            buf: Vec::new(),
            limits,
        })
    }

    /// Reads one packet along with its exact wire bytes. `stop` is polled
    /// whenever a read times out.
    pub fn read_frame(
        &mut self,
        deadline: Option<Instant>,
        stop: &dyn Fn() -> bool,
    ) -> Result<(Packet, Vec<u8>), ReadError> {
        let mut chunk = [0u8; 8192];
        loop {
            match decode_packet_with(&self.buf, &self.limits) {
                DecodeOutcome::Complete(packet, used) => {
                    let raw = self.buf.drain(..used).collect();
                    return Ok((packet, raw));
                }
                DecodeOutcome::ProtocolError(e) => return Err(ReadError::Protocol(e)),
                DecodeOutcome::NeedMoreData(_) => {}
            }
            if stop() {
                return Err(ReadError::Stopped);
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(ReadError::Timeout);
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(ReadError::Closed),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if matches!(
                        e.kind(),
                        ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted
                    ) => {}
                Err(e) => return Err(ReadError::Io(e)),
            }
        }
    }

    pub fn read_packet(
        &mut self,
        deadline: Option<Instant>,
        stop: &dyn Fn() -> bool,
    ) -> Result<Packet, ReadError> {
        self.read_frame(deadline, stop).map(|(p, _)| p)
    }
}
