//! Length-prefixed canonical JSON frames.
//!
//! A frame is a 4-byte big-endian body length followed by a compact JSON
//! object with keys in the fixed order `t`, `cid`, `topic`, `ts`, `pl`. The
//! payload (`pl`) is base64 and only present on PUB.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::topic::{validate_filter, validate_topic, TopicError};

pub const MAX_PAYLOAD: usize = 65_536;
pub const MAX_FRAME_BODY: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "CONNECT")]
    Connect,
    #[serde(rename = "SUBACK")]
    Suback,
    #[serde(rename = "SUB")]
    Sub,
    #[serde(rename = "UNSUB")]
    Unsub,
    #[serde(rename = "PUB")]
    Pub,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BusEnvelope {
    pub kind: Kind,
    pub client_id: String,
    /// Topic for PUB, filter for SUB/UNSUB/SUBACK, empty for CONNECT.
    pub topic: String,
    pub payload: Vec<u8>,
    /// Simulated time, nanoseconds.
    pub ts: u64,
}

impl BusEnvelope {
    pub fn connect(client_id: impl Into<String>, ts: u64) -> Self {
        Self::new(Kind::Connect, client_id, "", Vec::new(), ts)
    }

    pub fn subscribe(client_id: impl Into<String>, filter: impl Into<String>, ts: u64) -> Self {
        Self::new(Kind::Sub, client_id, filter, Vec::new(), ts)
    }

    pub fn unsubscribe(client_id: impl Into<String>, filter: impl Into<String>, ts: u64) -> Self {
        Self::new(Kind::Unsub, client_id, filter, Vec::new(), ts)
    }

    pub fn publish(client_id: impl Into<String>, topic: impl Into<String>, payload: Vec<u8>, ts: u64) -> Self {
        Self::new(Kind::Pub, client_id, topic, payload, ts)
    }

    fn new(kind: Kind, client_id: impl Into<String>, topic: impl Into<String>, payload: Vec<u8>, ts: u64) -> Self {
        BusEnvelope { kind, client_id: client_id.into(), topic: topic.into(), payload, ts }
    }

    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if self.client_id.is_empty() {
            return Err(EnvelopeError::EmptyClientId);
        }
        match self.kind {
            Kind::Connect => {
                if !self.topic.is_empty() {
                    return Err(EnvelopeError::UnexpectedTopic);
                }
            }
            Kind::Sub | Kind::Unsub | Kind::Suback => validate_filter(&self.topic)?,
            Kind::Pub => validate_topic(&self.topic)?,
        }
        if self.kind != Kind::Pub && !self.payload.is_empty() {
            return Err(EnvelopeError::UnexpectedPayload);
        }
        if self.payload.len() > MAX_PAYLOAD {
            return Err(EnvelopeError::PayloadTooLarge(self.payload.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("client id must be non-empty")]
    EmptyClientId,
    #[error("CONNECT carries no topic")]
    UnexpectedTopic,
    #[error("only PUB carries a payload")]
    UnexpectedPayload,
    #[error("payload of {0} bytes exceeds the 65536 byte limit")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot encode envelope: {0}")]
pub struct EncodeError(#[from] pub EnvelopeError);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame length {0} exceeds 1 MiB")]
    TooLarge(usize),
    #[error("malformed frame body: {0}")]
    Json(String),
    #[error("invalid payload encoding: {0}")]
    Base64(String),
    #[error("invalid envelope: {0}")]
    Envelope(#[from] EnvelopeError),
}

#[derive(Serialize)]
struct WireOut<'a> {
    t: Kind,
    cid: &'a str,
    topic: &'a str,
    ts: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pl: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    t: Kind,
    cid: String,
    topic: String,
    ts: u64,
    #[serde(default)]
    pl: Option<String>,
}

pub fn encode_frame(env: &BusEnvelope) -> Result<Vec<u8>, EncodeError> {
    env.validate()?;
    let wire = WireOut {
        t: env.kind,
        cid: &env.client_id,
        topic: &env.topic,
        ts: env.ts,
        pl: (env.kind == Kind::Pub).then(|| B64.encode(&env.payload)),
    };
    let body = serde_json::to_vec(&wire).expect("envelope serializes");
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Decode the first frame in `buf`. Returns `Ok(None)` when more bytes are
/// needed, otherwise the envelope and the number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(BusEnvelope, usize)>, FrameError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_BODY {
        return Err(FrameError::TooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let wire: WireIn = serde_json::from_slice(&buf[4..4 + len]).map_err(|e| FrameError::Json(e.to_string()))?;
    let payload = match (wire.t, wire.pl) {
        (Kind::Pub, Some(pl)) => B64.decode(pl).map_err(|e| FrameError::Base64(e.to_string()))?,
        (Kind::Pub, None) => return Err(FrameError::Json("PUB frame without `pl`".into())),
        (_, Some(_)) => return Err(FrameError::Envelope(EnvelopeError::UnexpectedPayload)),
        (_, None) => Vec::new(),
    };
    let env = BusEnvelope { kind: wire.t, client_id: wire.cid, topic: wire.topic, payload, ts: wire.ts };
    env.validate()?;
    Ok(Some((env, 4 + len)))
}
