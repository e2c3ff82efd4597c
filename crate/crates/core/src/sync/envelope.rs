//! Wire framing: `[u32 BE length][UTF-8 JSON envelope]`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::SyncError;
use crate::time::Timestamp;

/// Frames larger than this are rejected as malformed.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MsgType {
    Hello,
    Ping,
    Pong,
    AnnotationMsg,
    PhaseChange,
    StatsDigest,
    Bye,
}

impl MsgType {
    pub const ALL: [MsgType; 7] = [
        MsgType::Hello,
        MsgType::Ping,
        MsgType::Pong,
        MsgType::AnnotationMsg,
        MsgType::PhaseChange,
        MsgType::StatsDigest,
        MsgType::Bye,
    ];

    fn parse(s: &str) -> Option<MsgType> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Hello => "Hello",
            MsgType::Ping => "Ping",
            MsgType::Pong => "Pong",
            MsgType::AnnotationMsg => "AnnotationMsg",
            MsgType::PhaseChange => "PhaseChange",
            MsgType::StatsDigest => "StatsDigest",
            MsgType::Bye => "Bye",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncEnvelope {
    pub msg_type: MsgType,
    pub sender: String,
    pub seq: u64,
    pub sent_at: Timestamp,
    pub body: Value,
}

// Decoding goes through a string-typed shape so an unknown message type is
// distinguishable from a malformed frame.
#[derive(Deserialize)]
struct RawEnvelope {
    msg_type: String,
    sender: String,
    seq: u64,
    sent_at: Timestamp,
    #[serde(default)]
    body: Value,
}

pub fn encode_envelope(env: &SyncEnvelope) -> Vec<u8> {
    let json = serde_json::to_vec(env).expect("envelope serializes");
    let mut out = Vec::with_capacity(4 + json.len());
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    out
}

fn decode_json(json: &[u8]) -> Result<SyncEnvelope, SyncError> {
    let raw: RawEnvelope = serde_json::from_slice(json).map_err(|e| SyncError::MalformedFrame(e.to_string()))?;
    let msg_type = MsgType::parse(&raw.msg_type).ok_or(SyncError::UnknownMsgType(raw.msg_type))?;
    Ok(SyncEnvelope { msg_type, sender: raw.sender, seq: raw.seq, sent_at: raw.sent_at, body: raw.body })
}

/// Decodes exactly one frame.
pub fn decode_envelope(bytes: &[u8]) -> Result<SyncEnvelope, SyncError> {
    if bytes.len() < 4 {
        return Err(SyncError::MalformedFrame(format!("{} byte(s) cannot hold a length prefix", bytes.len())));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_LEN {
        return Err(SyncError::MalformedFrame(format!("frame length {len} exceeds limit")));
    }
    if bytes.len() - 4 != len {
        return Err(SyncError::MalformedFrame(format!("length prefix {len} but {} payload byte(s)", bytes.len() - 4)));
    }
    decode_json(&bytes[4..])
}

/// Splits a byte stream into envelopes.
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

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn next_envelope(&mut self) -> Option<Result<SyncEnvelope, SyncError>> {
        if self.buf.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME_LEN {
            self.buf.clear();
            return Some(Err(SyncError::MalformedFrame(format!("frame length {len} exceeds limit"))));
        }
        if self.buf.len() < 4 + len {
            return None;
        }
        let frame: Vec<u8> = self.buf.drain(..4 + len).collect();
        Some(decode_json(&frame[4..]))
    }
}
