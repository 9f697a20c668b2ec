//! Message framing: `u32` LE header length, UTF-8 JSON header, raw payload.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: &str = "1";
pub const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("truncated stream reading {what}: expected {expected} bytes, received {received}")]
    Truncated {
        what: &'static str,
        expected: usize,
        received: usize,
    },
    #[error("header of {0} bytes exceeds the {MAX_HEADER_BYTES}-byte limit")]
    HeaderTooLarge(usize),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("header declares {declared} payload bytes, message carries {actual}")]
    PayloadMismatch { declared: usize, actual: usize },
    #[error("stream error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Hello,
    SemanticEval,
    PerceptualEval,
    Shutdown,
    Response,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

/// JSON header shared by requests and responses. Unused fields are omitted on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    /// `[H, W, C]` of the image payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; 3]>,
    /// Perceptual requests append a reference image of the same dims after the image.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub has_reference: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
    pub payload_bytes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<Status>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<String>,
}

impl Header {
    pub fn new(kind: MessageKind) -> Self {
        Self {
            kind,
            version: None,
            dims: None,
            has_reference: false,
            positive: None,
            negative: None,
            payload_bytes: 0,
            loss: None,
            status: None,
            message: None,
            capabilities: None,
            preprocessing: None,
        }
    }

    pub fn response(status: Status) -> Self {
        Self {
            status: Some(status),
            ..Self::new(MessageKind::Response)
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self {
            message: Some(message.into()),
            ..Self::response(Status::Error)
        }
    }
}

/// Encodes one message. `header.payload_bytes` must equal `payload.len()`.
pub fn frame_message(header: &Header, payload: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    if header.payload_bytes != payload.len() {
        return Err(ProtocolError::PayloadMismatch {
            declared: header.payload_bytes,
            actual: payload.len(),
        });
    }
    let json = serde_json::to_vec(header).map_err(|e| ProtocolError::BadHeader(e.to_string()))?;
    if json.len() > MAX_HEADER_BYTES {
        return Err(ProtocolError::HeaderTooLarge(json.len()));
    }
    let mut out = Vec::with_capacity(4 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn write_message<W: Write>(w: &mut W, header: &Header, payload: &[u8]) -> Result<(), ProtocolError> {
    let bytes = frame_message(header, payload)?;
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| ProtocolError::Io(e.to_string()))
}

/// Reads until `buf` is full; returns the number of bytes obtained.
fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, ProtocolError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(ProtocolError::Io(e.to_string())),
        }
    }
    Ok(got)
}

fn exact<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<u8>, ProtocolError> {
    let mut buf = vec![0u8; n];
    let got = fill(r, &mut buf)?;
    if got < n {
        return Err(ProtocolError::Truncated {
            what,
            expected: n,
            received: got,
        });
    }
    Ok(buf)
}

/// Reads one message; `Ok(None)` on a clean end of stream before the first byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<(Header, Vec<u8>)>, ProtocolError> {
    let mut len = [0u8; 4];
    let got = fill(r, &mut len)?;
    if got == 0 {
        return Ok(None);
    }
    if got < 4 {
        return Err(ProtocolError::Truncated {
            what: "length prefix",
            expected: 4,
            received: got,
        });
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_HEADER_BYTES {
        return Err(ProtocolError::HeaderTooLarge(n));
    }
    let json = exact(r, n, "header")?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| ProtocolError::BadHeader(e.to_string()))?;
    let payload = exact(r, header.payload_bytes, "payload")?;
    Ok(Some((header, payload)))
}

/// Decodes a complete message held in memory.
pub fn parse_message(bytes: &[u8]) -> Result<(Header, Vec<u8>), ProtocolError> {
    let mut cur = std::io::Cursor::new(bytes);
    let msg = read_message(&mut cur)?.ok_or(ProtocolError::Truncated {
        what: "length prefix",
        expected: 4,
        received: 0,
    })?;
    let rest = bytes.len() - cur.position() as usize;
    if rest != 0 {
        return Err(ProtocolError::PayloadMismatch {
            declared: msg.0.payload_bytes,
            actual: msg.0.payload_bytes + rest,
        });
    }
    Ok(msg)
}

pub fn f32_payload(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn f32_from_payload(bytes: &[u8]) -> Result<Vec<f32>, ProtocolError> {
    if bytes.len() % 4 != 0 {
        return Err(ProtocolError::BadHeader(format!("payload of {} bytes is not a float array", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
