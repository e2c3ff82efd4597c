//! Connection state machine, independent of the transport that carries it.
//!
//! The driver feeds received envelopes into [`SyncPeer::handle`] together
//! with the local time at which they arrived, and writes out every
//! [`PeerEvent::Send`] it gets back.
//!
//! Ping and pong are probes: they are answered in whatever order they arrive
//! (even ahead of Hello) and never count towards gap detection, so a delayed
//! probe cannot make ordered traffic look lost.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uuid::Uuid;

use super::{estimate_offset, ClockOffset, MsgType, PingSample, SyncEnvelope, SyncError};
use crate::session::{Annotation, Role};
use crate::time::Timestamp;

pub const PROTOCOL_VERSION: u32 = 1;
/// Samples taken per estimation round.
pub const PING_SAMPLES: usize = 10;
pub const RESYNC_INTERVAL_MS: i64 = 60_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub instance_id: String,
    pub role: Role,
    pub protocol_version: u32,
    pub session_id: Option<Uuid>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeerEvent {
    Send(SyncEnvelope),
    Connected(Hello),
    OffsetUpdated(ClockOffset),
    Annotation(Box<Annotation>),
    PhaseChange(Value),
    StatsDigest(Value),
    GapWarning { sender: String, expected: u64, got: u64 },
    Closed { reason: String },
}

/// Sequence numbers already handled from one sender. Anything at or below
/// `floor` has been seen; `ahead` holds the ones that arrived early.
#[derive(Debug, Default)]
struct SeenSeqs {
    floor: u64,
    ahead: BTreeSet<u64>,
    /// Highest ordered (non-probe) seq so far; gaps are measured from it.
    max: u64,
}

impl SeenSeqs {
    fn insert(&mut self, seq: u64) -> bool {
        if seq <= self.floor || !self.ahead.insert(seq) {
            return false;
        }
        while self.ahead.remove(&(self.floor + 1)) {
            self.floor += 1;
        }
        true
    }

    fn seen(&self, seq: u64) -> bool {
        seq <= self.floor || self.ahead.contains(&seq)
    }

    /// First unseen seq between the last ordered message and `seq`.
    fn first_missing(&self, seq: u64) -> Option<u64> {
        let lo = self.max + 1;
        if seq <= lo {
            return None;
        }
        let below_floor = self.floor.min(seq - 1).saturating_sub(self.max);
        let start = lo.max(self.floor + 1);
        let early = if start < seq { self.ahead.range(start..seq).count() as u64 } else { 0 };
        if below_floor + early == seq - lo {
            return None;
        }
        (lo..seq).find(|s| !self.seen(*s))
    }
}

#[derive(Debug)]
pub struct SyncPeer {
    hello: Hello,
    next_seq: u64,
    next_nonce: u64,
    remote: Option<Hello>,
    seen: HashMap<String, SeenSeqs>,
    pending_pings: BTreeMap<u64, Timestamp>,
    samples: VecDeque<PingSample>,
    offset: Option<ClockOffset>,
    last_sync: Option<Timestamp>,
    closed: bool,
}

impl SyncPeer {
    pub fn new(instance_id: impl Into<String>, role: Role, session_id: Option<Uuid>) -> Self {
        SyncPeer {
            hello: Hello { instance_id: instance_id.into(), role, protocol_version: PROTOCOL_VERSION, session_id },
            next_seq: 1,
            next_nonce: 1,
            remote: None,
            seen: HashMap::new(),
            pending_pings: BTreeMap::new(),
            samples: VecDeque::new(),
            offset: None,
            last_sync: None,
            closed: false,
        }
    }

    /// Overrides the advertised protocol version (interop testing).
    pub fn with_protocol_version(mut self, v: u32) -> Self {
        self.hello.protocol_version = v;
        self
    }

    pub fn instance_id(&self) -> &str {
        &self.hello.instance_id
    }

    pub fn role(&self) -> Role {
        self.hello.role
    }

    pub fn remote(&self) -> Option<&Hello> {
        self.remote.as_ref()
    }

    /// Peer clock minus local clock, once at least one pong has arrived.
    pub fn offset(&self) -> Option<ClockOffset> {
        self.offset
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn envelope(&mut self, msg_type: MsgType, body: Value, now: Timestamp) -> SyncEnvelope {
        let seq = self.next_seq;
        self.next_seq += 1;
        SyncEnvelope { msg_type, sender: self.hello.instance_id.clone(), seq, sent_at: now, body }
    }

    pub fn hello(&mut self, now: Timestamp) -> SyncEnvelope {
        let body = serde_json::to_value(&self.hello).expect("hello serializes");
        self.envelope(MsgType::Hello, body, now)
    }

    pub fn ping(&mut self, now: Timestamp) -> SyncEnvelope {
        let nonce = self.next_nonce;
        self.next_nonce += 1;
        self.pending_pings.insert(nonce, now);
        self.envelope(MsgType::Ping, json!({ "nonce": nonce }), now)
    }

    pub fn annotation(&mut self, a: &Annotation, now: Timestamp) -> SyncEnvelope {
        self.envelope(MsgType::AnnotationMsg, serde_json::to_value(a).expect("annotation serializes"), now)
    }

    pub fn phase_change(&mut self, body: Value, now: Timestamp) -> SyncEnvelope {
        self.envelope(MsgType::PhaseChange, body, now)
    }

    pub fn stats_digest(&mut self, body: Value, now: Timestamp) -> SyncEnvelope {
        self.envelope(MsgType::StatsDigest, body, now)
    }

    pub fn bye(&mut self, reason: &str, now: Timestamp) -> SyncEnvelope {
        self.closed = true;
        self.envelope(MsgType::Bye, json!({ "reason": reason }), now)
    }

    /// Starts a new estimation round when the last one is older than the
    /// resync interval (or none has happened yet).
    pub fn needs_resync(&self, now: Timestamp) -> bool {
        self.last_sync.is_none_or(|t| now.millis_since(t) >= RESYNC_INTERVAL_MS)
    }

    pub fn begin_resync(&mut self, now: Timestamp) {
        self.last_sync = Some(now);
        self.samples.clear();
    }

    pub fn handle(&mut self, env: SyncEnvelope, now: Timestamp) -> Result<Vec<PeerEvent>, SyncError> {
        if self.closed {
            return Err(SyncError::Closed);
        }
        let mut events = Vec::new();
        let probe = matches!(env.msg_type, MsgType::Ping | MsgType::Pong);
        if self.remote.is_none() && env.msg_type != MsgType::Hello && !probe {
            return Err(SyncError::Protocol(format!("expected Hello, got {}", env.msg_type.as_str())));
        }
        let seen = self.seen.entry(env.sender.clone()).or_default();
        if !seen.insert(env.seq) {
            return Ok(events);
        }
        if !probe {
            if let Some(expected) = seen.first_missing(env.seq) {
                events.push(PeerEvent::GapWarning { sender: env.sender.clone(), expected, got: env.seq });
            }
            seen.max = seen.max.max(env.seq);
        }

        match env.msg_type {
            MsgType::Hello => {
                let hello: Hello = serde_json::from_value(env.body).map_err(|e| SyncError::BadBody(e.to_string()))?;
                if hello.protocol_version != PROTOCOL_VERSION {
                    let reason = format!("protocol version {} unsupported (want {PROTOCOL_VERSION})", hello.protocol_version);
                    events.push(PeerEvent::Send(self.bye(&reason, now)));
                    events.push(PeerEvent::Closed { reason });
                    return Ok(events);
                }
                self.remote = Some(hello.clone());
                events.push(PeerEvent::Connected(hello));
            }
            MsgType::Ping => {
                let nonce = env.body.get("nonce").and_then(Value::as_u64).ok_or_else(|| SyncError::BadBody("ping without nonce".into()))?;
                let body = json!({ "nonce": nonce, "t1": env.sent_at, "t2": now });
                let pong = self.envelope(MsgType::Pong, body, now);
                events.push(PeerEvent::Send(pong));
            }
            MsgType::Pong => {
                let field = |k: &str| env.body.get(k).and_then(Value::as_i64);
                let (Some(nonce), Some(t2)) = (env.body.get("nonce").and_then(Value::as_u64), field("t2")) else {
                    return Err(SyncError::BadBody("pong missing fields".into()));
                };
                let Some(t1) = self.pending_pings.remove(&nonce) else {
                    return Ok(events);
                };
                let sample = PingSample { t1, t2: Timestamp(t2), t3: env.sent_at, t4: now };
                self.samples.push_back(sample);
                while self.samples.len() > PING_SAMPLES {
                    self.samples.pop_front();
                }
                let samples: Vec<_> = self.samples.iter().copied().collect();
                if let Ok(o) = estimate_offset(&samples) {
                    self.offset = Some(o);
                    events.push(PeerEvent::OffsetUpdated(o));
                }
            }
            MsgType::AnnotationMsg => {
                let a: Annotation = serde_json::from_value(env.body).map_err(|e| SyncError::BadBody(e.to_string()))?;
                events.push(PeerEvent::Annotation(Box::new(a)));
            }
            MsgType::PhaseChange => events.push(PeerEvent::PhaseChange(env.body)),
            MsgType::StatsDigest => events.push(PeerEvent::StatsDigest(env.body)),
            MsgType::Bye => {
                self.closed = true;
                let reason = env.body.get("reason").and_then(Value::as_str).unwrap_or("").to_string();
                events.push(PeerEvent::Closed { reason });
            }
        }
        Ok(events)
    }
}
