//! Glue between an [`Engine`] and one sync peer, independent of transport.
//!
//! The authority (wizard or single user) announces run start/stop. A replica
//! (observer) follows those and relays its own annotations live on a best
//! effort basis. After the run stops the replica sends its full authored log
//! in one message; the authority merges it and answers with the merged log,
//! which the replica adopts.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uuid::Uuid;

use super::{Engine, HarnessError, HarnessEvent, Result};
use crate::session::{Annotation, Origin, Role, StartRequest};
use crate::sync::{ClockOffset, PeerEvent, SyncEnvelope, SyncPeer, PING_SAMPLES};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum PhaseMsg {
    Pilot { run_id: Uuid, participant_id: String, session_label: String, anticipated_duration_ms: i64 },
    Analyzer { run_id: Uuid },
    /// Everything the replica authored during the run.
    ObserverDone { run_id: Uuid, log: Vec<Annotation> },
    Merged {
        run_id: Uuid,
        recording_start: Option<Timestamp>,
        recording_duration_ms: Option<i64>,
        log: Vec<Annotation>,
    },
}

pub struct LinkDriver {
    peer: SyncPeer,
    role: Role,
    run_id: Option<Uuid>,
    stopped: bool,
}

impl LinkDriver {
    pub fn new(instance_id: &str, role: Role, session_id: Option<Uuid>) -> Self {
        LinkDriver { peer: SyncPeer::new(instance_id, role, session_id), role, run_id: None, stopped: false }
    }

    pub fn is_authority(&self) -> bool {
        self.role != Role::Observer
    }

    pub fn peer(&self) -> &SyncPeer {
        &self.peer
    }

    /// Current estimate of peer clock minus local clock.
    pub fn offset(&self) -> ClockOffset {
        self.peer.offset().unwrap_or(ClockOffset::ZERO)
    }

    pub fn run_id(&self) -> Option<Uuid> {
        self.run_id
    }

    fn ping_round(&mut self, now: Timestamp) -> Vec<SyncEnvelope> {
        self.peer.begin_resync(now);
        (0..PING_SAMPLES).map(|_| self.peer.ping(now)).collect()
    }

    /// Hello followed by the initial round of pings.
    pub fn connect(&mut self, now: Timestamp) -> Vec<SyncEnvelope> {
        let mut out = vec![self.peer.hello(now)];
        out.extend(self.ping_round(now));
        out
    }

    /// Periodic resynchronization.
    pub fn poll(&mut self, now: Timestamp) -> Vec<SyncEnvelope> {
        if self.peer.remote().is_some() && self.peer.needs_resync(now) {
            self.ping_round(now)
        } else {
            Vec::new()
        }
    }

    fn phase(&mut self, msg: &PhaseMsg, now: Timestamp) -> SyncEnvelope {
        self.peer.phase_change(serde_json::to_value(msg).expect("phase serializes"), now)
    }

    fn own(&self, a: &Annotation) -> bool {
        a.author.instance == self.peer.instance_id() && a.origin != Origin::Remote
    }

    /// Reacts to an event from the local engine's feed.
    pub fn on_local(&mut self, ev: &HarnessEvent, now: Timestamp) -> Vec<SyncEnvelope> {
        if self.peer.is_closed() {
            return Vec::new();
        }
        match ev.kind.as_str() {
            "annotation_added" => {
                let Ok(a) = serde_json::from_value::<Annotation>(ev.data.clone()) else { return Vec::new() };
                if self.own(&a) && Some(a.run_id) == self.run_id && !self.stopped {
                    return vec![self.peer.annotation(&a, now)];
                }
                Vec::new()
            }
            "run_started" if self.is_authority() => {
                let Some(run_id) = ev.run_id else { return Vec::new() };
                self.run_id = Some(run_id);
                self.stopped = false;
                let field = |k: &str| ev.data.get(k).cloned().unwrap_or(Value::Null);
                let msg = PhaseMsg::Pilot {
                    run_id,
                    participant_id: field("participant_id").as_str().unwrap_or_default().to_string(),
                    session_label: field("session_label").as_str().unwrap_or_default().to_string(),
                    anticipated_duration_ms: field("anticipated_duration_ms").as_i64().unwrap_or(0),
                };
                vec![self.phase(&msg, now)]
            }
            "run_stopped" if self.is_authority() && ev.run_id == self.run_id => {
                self.stopped = true;
                let run_id = ev.run_id.expect("matched above");
                vec![self.phase(&PhaseMsg::Analyzer { run_id }, now)]
            }
            _ => Vec::new(),
        }
    }

    /// Handles one received envelope against the local engine.
    pub fn on_remote(&mut self, engine: &mut Engine, env: SyncEnvelope, now: Timestamp) -> Result<Vec<SyncEnvelope>> {
        let raw = env.clone();
        let events = self.peer.handle(env, now)?;
        let mut out = Vec::new();
        for ev in events {
            match ev {
                PeerEvent::Send(e) => out.push(e),
                PeerEvent::Connected(h) => engine.note_peer("peer_connected", json!(h), now),
                PeerEvent::OffsetUpdated(o) => engine.note_peer("peer_offset", json!(o), now),
                PeerEvent::GapWarning { sender, expected, got } => {
                    engine.note_peer("peer_gap", json!({ "sender": sender, "expected": expected, "got": got }), now)
                }
                PeerEvent::Closed { reason } => engine.note_peer("peer_closed", json!({ "reason": reason }), now),
                PeerEvent::StatsDigest(v) => engine.note_peer("peer_stats", v, now),
                // live relay only; late arrivals are covered by the final merge
                PeerEvent::Annotation(a) if Some(a.run_id) == self.run_id && !self.stopped => {
                    engine.apply_remote(a.run_id, &raw, &self.offset(), now)?;
                }
                PeerEvent::Annotation(_) => {}
                PeerEvent::PhaseChange(body) => out.extend(self.on_phase(engine, body, now)?),
            }
        }
        Ok(out)
    }

    fn on_phase(&mut self, engine: &mut Engine, body: Value, now: Timestamp) -> Result<Vec<SyncEnvelope>> {
        let msg: PhaseMsg = serde_json::from_value(body).map_err(|e| HarnessError::BadRequest(format!("phase message: {e}")))?;
        let mut out = Vec::new();
        match (msg, self.is_authority()) {
            (PhaseMsg::Pilot { run_id, participant_id, session_label, anticipated_duration_ms }, false) => {
                let session_id = engine.latest_session().ok_or_else(|| HarnessError::NotConfigured("no local session to follow into".into()))?;
                let req = StartRequest { participant_id, session_label, anticipated_duration_ms };
                engine.start_pilot(session_id, &req, now, Some(run_id))?;
                self.run_id = Some(run_id);
                self.stopped = false;
            }
            (PhaseMsg::Analyzer { run_id }, false) if Some(run_id) == self.run_id => {
                if engine.run(run_id)?.is_running() {
                    engine.stop_run(run_id, now)?;
                }
                self.stopped = true;
                let log = engine.run(run_id)?.annotations().iter().filter(|a| self.own(a)).cloned().collect();
                out.push(self.phase(&PhaseMsg::ObserverDone { run_id, log }, now));
            }
            (PhaseMsg::ObserverDone { run_id, log }, true) if Some(run_id) == self.run_id => {
                let batch: Vec<Annotation> = log
                    .into_iter()
                    .map(|mut a| {
                        a.origin = Origin::Remote;
                        a
                    })
                    .collect();
                let merged = engine.merge_remote(run_id, &batch, &self.offset(), now)?;
                let msg = PhaseMsg::Merged {
                    run_id,
                    recording_start: merged.recording_start,
                    recording_duration_ms: merged.recording_duration_ms,
                    log: merged.annotations().to_vec(),
                };
                out.push(self.phase(&msg, now));
            }
            (PhaseMsg::Merged { run_id, recording_start, recording_duration_ms, log }, false) if Some(run_id) == self.run_id => {
                engine.adopt_log(run_id, log, recording_start, recording_duration_ms, now)?;
            }
            (other, _) => engine.note_peer("peer_phase_ignored", json!(other), now),
        }
        Ok(out)
    }
}
