//! Wire protocol for delegating tracking to an external process.
//!
//! Every message is a little-endian `u32` byte length followed by that many
//! bytes of UTF-8 JSON carrying a `type` field. The adapter speaks first
//! with `hello`; the client answers with `init` and then alternates
//! `track` requests with `result` or `error` responses, one at a time,
//! until it sends `shutdown`.
//!
//! Frames never cross the pipe: requests name a `.ssq` file and frame
//! indices that the adapter reads itself.

mod client;
mod server;
mod transport;

use std::io::{Read, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{AdapterClient, AdapterTracker, TrackerBackend};
pub use server::AdapterServer;
pub use transport::{ChildTransport, LoopbackTransport, StreamTransport, Transport};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
/// Upper bound on a single message body.
pub const MAX_MESSAGE_LEN: u32 = 256 << 20;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdapterError {
    #[error("adapter speaks protocol version {got}, expected {expected}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("no response from adapter within {0:?}")]
    Timeout(Duration),
    #[error("adapter reported an error: {0}")]
    Remote(String),
    #[error("adapter response has the wrong shape: {0}")]
    ShapeMismatch(String),
    #[error("adapter connection lost: {0}")]
    BrokenPipe(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("adapter lacks capability '{0}'")]
    MissingCapability(Capability),
    #[error("cannot start adapter: {0}")]
    Spawn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Temporal,
    Stereo,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Capability::Temporal => "temporal",
            Capability::Stereo => "stereo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Temporal,
    Stereo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Camera {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireQuery {
    /// Index into the request's `frame_indices`.
    pub frame: u32,
    pub x: f64,
    pub y: f64,
}

/// Last known estimate of a query before the requested frames, used to
/// resume tracking across windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePrior {
    /// Global frame index of the estimate.
    pub frame: u32,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireSample {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRequest {
    pub request_id: u64,
    pub mode: Mode,
    pub sequence_path: String,
    /// Temporal mode only; stereo requests use the implicit left/right pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
    /// Sorted ascending.
    pub frame_indices: Vec<u32>,
    pub queries: Vec<WireQuery>,
    /// One entry per query when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<WirePrior>>,
}

impl TrackRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err("frame_indices must be strictly ascending".into());
        }
        if self.frame_indices.is_empty() {
            return Err("frame_indices is empty".into());
        }
        if let Some(q) = self.queries.iter().find(|q| q.frame as usize >= self.frame_indices.len()) {
            return Err(format!("query frame {} does not reference a listed index", q.frame));
        }
        if self.mode == Mode::Temporal && self.camera.is_none() {
            return Err("temporal requests need a camera".into());
        }
        if self.mode == Mode::Stereo && self.frame_indices.len() != 1 {
            return Err("stereo requests carry exactly one frame index".into());
        }
        if let Some(p) = &self.prior {
            if p.len() != self.queries.len() {
                return Err(format!("prior has {} entries for {} queries", p.len(), self.queries.len()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub request_id: u64,
    /// `tracks[query][frame]`, frames in `frame_indices` order.
    pub tracks: Vec<Vec<WireSample>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello { version: u32, capabilities: Vec<Capability> },
    Init { width: u32, height: u32, channels: u8, window: u32 },
    Track(TrackRequest),
    Result(TrackResult),
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<u64>,
        message: String,
    },
    Shutdown,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Init { .. } => "init",
            Message::Track(_) => "track",
            Message::Result(_) => "result",
            Message::Error { .. } => "error",
            Message::Shutdown => "shutdown",
        }
    }
}

/// Serializes `msg` into one length-prefixed frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("messages always serialize");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parses one JSON body.
pub fn decode_body(body: &[u8]) -> Result<Message, AdapterError> {
    let text = std::str::from_utf8(body).map_err(|_| AdapterError::Protocol("message body is not UTF-8".into()))?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| AdapterError::Protocol(format!("bad JSON: {e}")))?;
    match value.get("type").and_then(|t| t.as_str()) {
        Some("hello" | "init" | "track" | "result" | "error" | "shutdown") => {}
        Some(other) => return Err(AdapterError::Protocol(format!("unknown message type '{other}'"))),
        None => return Err(AdapterError::Protocol("message has no string 'type' field".into())),
    }
    serde_json::from_value(value).map_err(|e| AdapterError::Protocol(format!("malformed message: {e}")))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), AdapterError> {
    w.write_all(&encode(msg)).and_then(|_| w.flush()).map_err(|e| AdapterError::BrokenPipe(e.to_string()))
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, AdapterError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(AdapterError::BrokenPipe("stream ended inside a length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(AdapterError::BrokenPipe(e.to_string())),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_MESSAGE_LEN {
        return Err(AdapterError::Protocol(format!("message length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(|e| AdapterError::BrokenPipe(format!("stream ended inside a message body: {e}")))?;
    decode_body(&body).map(Some)
}
