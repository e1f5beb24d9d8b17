//! Checker wire protocol: message schemas and length-prefixed JSON framing.
//!
//! Every message travels as one frame: a 4-byte big-endian body length
//! followed by a UTF-8 JSON object whose `"type"` field names the kind.
//! Offsets are byte counts into the code stream; an event at offset `k`
//! covers bytes `[0, k)`.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Byte offset into a code stream.
pub type Offset = u64;

/// Free-form checker metadata attached to progress and error events.
pub type Meta = Map<String, Value>;

/// Largest frame body accepted in either direction.
pub const MAX_FRAME_LEN: usize = 1 << 24;

const HEADER_LEN: usize = 4;

/// Identifier of one checker session (active or checkpoint).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Msg {
    /// Runtime to active session: append code bytes. `eos` marks end of stream.
    Submit {
        delta: String,
        #[serde(default, skip_serializing_if = "is_false")]
        eos: bool,
    },
    /// Active session announces itself; `pid` is the checkpoint it was resumed from.
    Init { id: SessionId, pid: Option<SessionId> },
    Progress {
        off: Offset,
        cat: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        meta: Option<Meta>,
    },
    Error {
        off: Offset,
        cat: String,
        diag: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        meta: Option<Meta>,
    },
    /// Runtime to checkpoint session: start an active session on `chan`.
    Resume { chan: String },
    /// Checkpoint session announces itself.
    Chkpt { off: Offset, id: SessionId, pid: SessionId },
}

impl Msg {
    pub fn submit(delta: impl Into<String>) -> Msg {
        Msg::Submit { delta: delta.into(), eos: false }
    }

    pub fn end_of_stream() -> Msg {
        Msg::Submit { delta: String::new(), eos: true }
    }

    pub fn progress(off: Offset, cat: impl Into<String>) -> Msg {
        Msg::Progress { off, cat: cat.into(), meta: None }
    }

    pub fn error(off: Offset, cat: impl Into<String>, diag: impl Into<String>) -> Msg {
        Msg::Error { off, cat: cat.into(), diag: diag.into(), meta: None }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Msg::Submit { .. } => "submit",
            Msg::Init { .. } => "init",
            Msg::Progress { .. } => "progress",
            Msg::Error { .. } => "error",
            Msg::Resume { .. } => "resume",
            Msg::Chkpt { .. } => "chkpt",
        }
    }

    /// Offset carried by the message, if its kind has one.
    pub fn offset(&self) -> Option<Offset> {
        match self {
            Msg::Progress { off, .. } | Msg::Error { off, .. } | Msg::Chkpt { off, .. } => {
                Some(*off)
            }
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProtoError {
    #[error("frame body of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    Oversize(usize),
    #[error("incomplete frame: need {needed} bytes, have {have}")]
    Incomplete { needed: usize, have: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ProtoError {
    pub fn is_incomplete(&self) -> bool {
        matches!(self, ProtoError::Incomplete { .. })
    }
}

/// Serializes `msg` into one frame.
pub fn encode_frame(msg: &Msg) -> Result<Vec<u8>, ProtoError> {
    let body = serde_json::to_vec(msg).map_err(|e| ProtoError::Protocol(e.to_string()))?;
    if body.len() > MAX_FRAME_LEN {
        return Err(ProtoError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes the frame at the start of `bytes`, returning the message and the
/// number of bytes it occupied.
pub fn decode_frame(bytes: &[u8]) -> Result<(Msg, usize), ProtoError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtoError::Incomplete { needed: HEADER_LEN, have: bytes.len() });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtoError::Oversize(len));
    }
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(ProtoError::Incomplete { needed: total, have: bytes.len() });
    }
    let msg = decode_body(&bytes[HEADER_LEN..total])?;
    Ok((msg, total))
}

fn decode_body(body: &[u8]) -> Result<Msg, ProtoError> {
    serde_json::from_slice(body).map_err(|e| ProtoError::Protocol(e.to_string()))
}

/// Accumulates bytes from a channel and yields complete messages.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` when more bytes are needed.
    pub fn next_msg(&mut self) -> Result<Option<Msg>, ProtoError> {
        match decode_frame(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            Err(e) if e.is_incomplete() => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Writes one frame to a blocking writer.
pub fn write_msg<W: Write>(w: &mut W, msg: &Msg) -> Result<(), ProtoError> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame from a blocking reader; `Ok(None)` on clean EOF at a frame boundary.
pub fn read_msg<R: Read>(r: &mut R) -> Result<Option<Msg>, ProtoError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = r.read(&mut header[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(ProtoError::Incomplete { needed: HEADER_LEN, have: got });
        }
        got += n;
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtoError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body).map(Some)
}

/// Checks that progress offsets reported by each session never decrease.
#[derive(Debug, Default)]
pub struct ProgressValidator {
    last: HashMap<SessionId, Offset>,
}

impl ProgressValidator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, session: SessionId, msg: &Msg) -> Result<(), ProtoError> {
        if let Msg::Progress { off, .. } = msg {
            let last = self.last.entry(session).or_insert(0);
            if *off < *last {
                return Err(ProtoError::Protocol(format!(
                    "session {session} progress went backwards: {off} after {last}"
                )));
            }
            *last = *off;
        }
        Ok(())
    }
}
