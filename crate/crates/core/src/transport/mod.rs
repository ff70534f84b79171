//! Versioned binary framing for protocol messages, with an in-process
//! loopback backend and a TCP backend.
//!
//! Frame layout, little-endian:
//!
//! ```text
//! "PFLL" | u8 version | u8 kind | u32 round | u32 client_id | u32 payload_len | payload
//! ```
//!
//! Tensor payloads are single nn fragments holding `f32` values.

mod codec;
mod links;

use std::io::{Read, Write};

use thiserror::Error;

use crate::nn::NnError;
use crate::protocol::{MessageKind, ProtocolError};

pub use codec::{decode_message, encode_message};
pub use links::{
    connect_client, run_client, run_server, FrameRecord, LoopbackLink, Meter, RoundTally, TcpLink, TcpServer,
};

pub const MAGIC: [u8; 4] = *b"PFLL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const MAX_PAYLOAD: usize = 1 << 31;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    BadKind(u8),
    #[error("truncated frame: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload of {0} bytes exceeds the 2^31 byte limit")]
    Oversized(usize),
    #[error("malformed {kind} payload: {msg}")]
    Payload { kind: MessageKind, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

impl TransportError {
    fn payload(kind: MessageKind, e: NnError) -> Self {
        TransportError::Payload { kind, msg: e.to_string() }
    }

    pub(crate) fn into_protocol(self, client: u32) -> ProtocolError {
        match self {
            TransportError::Protocol(p) => p,
            other => ProtocolError::Link { client, msg: other.to_string() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: MessageKind,
    pub round: u32,
    pub client_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, TransportError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(TransportError::Oversized(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.kind.code());
    out.extend_from_slice(&frame.round.to_le_bytes());
    out.extend_from_slice(&frame.client_id.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

struct Header {
    kind: MessageKind,
    round: u32,
    client_id: u32,
    len: usize,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, TransportError> {
    let magic: [u8; 4] = h[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(TransportError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(TransportError::BadVersion(h[4]));
    }
    let kind = MessageKind::from_code(h[5]).ok_or(TransportError::BadKind(h[5]))?;
    let word = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().expect("4 bytes"));
    let len = word(14) as usize;
    if len > MAX_PAYLOAD {
        return Err(TransportError::Oversized(len));
    }
    Ok(Header { kind, round: word(6), client_id: word(10), len })
}

/// Decodes one frame from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), TransportError> {
    if bytes.len() < HEADER_LEN {
        return Err(TransportError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let h = parse_header(bytes[..HEADER_LEN].try_into().expect("header length"))?;
    let end = HEADER_LEN + h.len;
    if bytes.len() < end {
        return Err(TransportError::Truncated { expected: end, actual: bytes.len() });
    }
    let frame = Frame { kind: h.kind, round: h.round, client_id: h.client_id, payload: bytes[HEADER_LEN..end].to_vec() };
    Ok((frame, end))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<usize, TransportError> {
    let bytes = encode_frame(frame)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Reads one frame; a clean end of stream before any header byte yields
/// `Ok(None)`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, TransportError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Truncated { expected: HEADER_LEN, actual: got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header = parse_header(&h)?;
    let mut payload = vec![0u8; header.len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TransportError::Truncated { expected: HEADER_LEN + header.len, actual: HEADER_LEN },
        _ => e.into(),
    })?;
    Ok(Some(Frame { kind: header.kind, round: header.round, client_id: header.client_id, payload }))
}
