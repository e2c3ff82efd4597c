//! Sessions, pilot runs, the annotation log, shortcut bindings, and live
//! statistics.

mod annotation;
mod bindings;
mod run;
mod stats;

pub use annotation::{is_valid_color, Annotation, AnnotationKind, AnnotationPayload, Author, Origin, Role};
pub use bindings::{validate_bindings, BindingError, ShortcutBinding};
pub use run::{AnnotationPatch, EditRecord, ElapsedCheck, ElapsedStatus, FieldChange, NewAnnotation, PilotRun, Utterance};
pub use stats::LiveStats;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::media::StreamDescriptor;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error("checklist incomplete: {0:?}")]
    ChecklistIncomplete(Vec<String>),
    #[error("stream `{0}` is not ingesting")]
    StreamUnavailable(String),
    #[error("operation not allowed in phase {0:?}")]
    WrongPhase(Phase),
    #[error("payload `{payload}` does not match kind {kind}")]
    PayloadMismatch { kind: AnnotationKind, payload: String },
    #[error("run is not active")]
    RunNotActive,
    #[error("run has not been stopped")]
    RunNotStopped,
    #[error("stop time must be after start time")]
    InvalidStop,
    #[error("unknown annotation {0}")]
    UnknownId(Uuid),
    #[error("annotation {0} already exists")]
    DuplicateId(Uuid),
    #[error("kind change {from} -> {to} is not allowed")]
    IllegalKindChange { from: AnnotationKind, to: AnnotationKind },
    #[error("no emitter registered for event source {0}")]
    UnknownEventSource(EventSource),
    #[error("span {start_ms}..{end_ms} outside run duration {duration}")]
    SpanOutOfRange { start_ms: i64, end_ms: i64, duration: i64 },
    #[error("utterance spans {first:?} and {second:?} overlap")]
    OverlappingSpans { first: (i64, i64), second: (i64, i64) },
    #[error("media offset {offset} outside [0, {duration}]")]
    OffsetOutOfRange { offset: i64, duration: i64 },
    #[error("wall time {wall_time} disagrees with media offset {media_offset}")]
    InconsistentTimes { wall_time: Timestamp, media_offset: i64 },
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Setup,
    Pilot,
    Analyzer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub text: String,
    #[serde(default)]
    pub checked: bool,
}

impl ChecklistItem {
    pub fn new(text: impl Into<String>) -> Self {
        ChecklistItem { text: text.into(), checked: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_name: String,
    pub role: Role,
    #[serde(default = "default_instance")]
    pub instance_id: String,
    pub fpv_source: StreamDescriptor,
    #[serde(default)]
    pub tpv_source: Option<StreamDescriptor>,
    #[serde(default)]
    pub wizarding_url: String,
    #[serde(default)]
    pub checklist: Vec<ChecklistItem>,
    #[serde(default)]
    pub bindings: Vec<ShortcutBinding>,
    #[serde(default)]
    pub record_inputs: Vec<String>,
    /// Lets an observer drive the wizarding interface. Off unless asked for.
    #[serde(default)]
    pub observer_drives_wizard: bool,
}

fn default_instance() -> String {
    "local".to_string()
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        validate_bindings(&self.bindings)?;
        let mut ids = BTreeSet::new();
        for s in self.streams() {
            if s.expected_fps.is_nan() || s.expected_fps <= 0.0 {
                return Err(SessionError::InvalidConfig(format!("stream `{}` needs expected_fps > 0", s.stream_id)));
            }
            if !ids.insert(s.stream_id.as_str()) {
                return Err(SessionError::InvalidConfig(format!("stream id `{}` used twice", s.stream_id)));
            }
        }
        if let Some(missing) = self.record_inputs.iter().find(|r| !ids.contains(r.as_str())) {
            return Err(SessionError::InvalidConfig(format!("record input `{missing}` is not a configured stream")));
        }
        if self.instance_id.is_empty() {
            return Err(SessionError::InvalidConfig("instance_id is empty".into()));
        }
        Ok(())
    }

    pub fn streams(&self) -> impl Iterator<Item = &StreamDescriptor> {
        std::iter::once(&self.fpv_source).chain(self.tpv_source.iter())
    }

    /// Streams to record: `record_inputs` if given, else every configured stream.
    pub fn recorded_streams(&self) -> Vec<String> {
        if self.record_inputs.is_empty() {
            self.streams().map(|s| s.stream_id.clone()).collect()
        } else {
            self.record_inputs.clone()
        }
    }

    pub fn binding_for_key(&self, key: &str) -> Option<&ShortcutBinding> {
        self.bindings.iter().find(|b| b.key == key)
    }

    pub fn author(&self) -> Author {
        Author::new(self.role, self.instance_id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "name", rename_all = "snake_case")]
pub enum EventSource {
    ShortcutKey(String),
    WizardEvent(String),
    StreamEvent(String),
}

impl fmt::Display for EventSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventSource::ShortcutKey(k) => write!(f, "key:{k}"),
            EventSource::WizardEvent(n) => write!(f, "wizard:{n}"),
            EventSource::StreamEvent(n) => write!(f, "stream:{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TriggerId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoTrigger {
    pub id: TriggerId,
    pub source: EventSource,
    pub binding: ShortcutBinding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRequest {
    pub participant_id: String,
    pub session_label: String,
    pub anticipated_duration_ms: i64,
}

/// Tells the session whether a stream is currently ingesting.
pub trait StreamStatus {
    fn is_ingesting(&self, stream_id: &str) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: Uuid,
    pub config: SessionConfig,
    pub phase: Phase,
    pub runs: Vec<Uuid>,
    pub active_run: Option<Uuid>,
    triggers: Vec<AutoTrigger>,
    emitters: BTreeSet<EventSource>,
}

impl Session {
    pub fn new(id: Uuid, config: SessionConfig) -> Result<Self, SessionError> {
        config.validate()?;
        let emitters = config.bindings.iter().map(|b| EventSource::ShortcutKey(b.key.clone())).collect();
        Ok(Session { id, config, phase: Phase::Setup, runs: Vec::new(), active_run: None, triggers: Vec::new(), emitters })
    }

    pub fn set_checked(&mut self, index: usize, checked: bool) -> Option<&ChecklistItem> {
        let item = self.config.checklist.get_mut(index)?;
        item.checked = checked;
        Some(item)
    }

    pub fn unchecked_items(&self) -> Vec<String> {
        self.config.checklist.iter().filter(|c| !c.checked).map(|c| c.text.clone()).collect()
    }

    /// Creates a run. Recording is started by the caller once this succeeds.
    pub fn start_pilot(
        &mut self,
        run_id: Uuid,
        req: &StartRequest,
        now: Timestamp,
        streams: &dyn StreamStatus,
    ) -> Result<PilotRun, SessionError> {
        if self.phase == Phase::Pilot {
            return Err(SessionError::WrongPhase(self.phase));
        }
        let unchecked = self.unchecked_items();
        if !unchecked.is_empty() {
            return Err(SessionError::ChecklistIncomplete(unchecked));
        }
        for s in self.config.recorded_streams().into_iter().chain([self.config.fpv_source.stream_id.clone()]) {
            if !streams.is_ingesting(&s) {
                return Err(SessionError::StreamUnavailable(s));
            }
        }
        if req.anticipated_duration_ms < 0 {
            return Err(SessionError::InvalidConfig("anticipated duration is negative".into()));
        }
        let pinned = self.config.bindings.iter().filter(|b| b.pinned).map(|b| b.name.clone()).collect();
        let run = PilotRun::new(run_id, self.id, &req.participant_id, &req.session_label, req.anticipated_duration_ms, now, pinned);
        self.phase = Phase::Pilot;
        self.runs.push(run_id);
        self.active_run = Some(run_id);
        Ok(run)
    }

    /// Marks the active run finished and enters the analyzer phase.
    pub fn finish_pilot(&mut self) -> Result<Uuid, SessionError> {
        let id = self.active_run.take().ok_or(SessionError::RunNotActive)?;
        self.phase = Phase::Analyzer;
        Ok(id)
    }

    pub fn register_emitter(&mut self, source: EventSource) {
        self.emitters.insert(source);
    }

    pub fn has_emitter(&self, source: &EventSource) -> bool {
        self.emitters.contains(source)
    }

    pub fn register_auto_trigger(&mut self, source: EventSource, binding: ShortcutBinding) -> Result<TriggerId, SessionError> {
        validate_bindings(std::slice::from_ref(&binding))?;
        if !self.emitters.contains(&source) {
            return Err(SessionError::UnknownEventSource(source));
        }
        let id = TriggerId(self.triggers.iter().map(|t| t.id.0 + 1).max().unwrap_or(1));
        self.triggers.push(AutoTrigger { id, source, binding });
        Ok(id)
    }

    pub fn triggers(&self) -> &[AutoTrigger] {
        &self.triggers
    }

    pub fn triggers_for<'a>(&'a self, source: &'a EventSource) -> impl Iterator<Item = &'a AutoTrigger> + 'a {
        self.triggers.iter().filter(move |t| &t.source == source)
    }

    pub fn has_trigger_for(&self, source: &EventSource) -> bool {
        self.triggers.iter().any(|t| &t.source == source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Live(&'static [&'static str]);
    impl StreamStatus for Live {
        fn is_ingesting(&self, s: &str) -> bool {
            self.0.contains(&s)
        }
    }

    fn config() -> SessionConfig {
        SessionConfig {
            session_name: "mind the tap".into(),
            role: Role::SingleUser,
            instance_id: "inst-a".into(),
            fpv_source: StreamDescriptor::new("fpv", "sim://fpv", 15.0),
            tpv_source: None,
            wizarding_url: "https://example.invalid/slides".into(),
            checklist: vec![ChecklistItem::new("Check foot visibility")],
            bindings: vec![
                ShortcutBinding::new("1", AnnotationKind::Correct, "correct", "#00AA00").pinned(),
                ShortcutBinding::new("2", AnnotationKind::Incorrect, "incorrect", "#AA0000").pinned(),
            ],
            record_inputs: vec![],
            observer_drives_wizard: false,
        }
    }

    fn req() -> StartRequest {
        StartRequest { participant_id: "P1".into(), session_label: "direct".into(), anticipated_duration_ms: 600_000 }
    }

    #[test]
    fn start_requires_checklist() {
        let mut s = Session::new(Uuid::from_u128(1), config()).unwrap();
        let err = s.start_pilot(Uuid::from_u128(2), &req(), Timestamp(0), &Live(&["fpv"])).unwrap_err();
        assert_eq!(err, SessionError::ChecklistIncomplete(vec!["Check foot visibility".into()]));
        s.set_checked(0, true);
        let run = s.start_pilot(Uuid::from_u128(2), &req(), Timestamp(5), &Live(&["fpv"])).unwrap();
        assert_eq!(run.start_time, Timestamp(5));
        assert!(run.annotations().is_empty());
        assert_eq!(s.phase, Phase::Pilot);
        assert_eq!(run.pinned, vec!["correct".to_string(), "incorrect".to_string()]);
    }

    #[test]
    fn start_requires_fpv() {
        let mut s = Session::new(Uuid::from_u128(1), config()).unwrap();
        s.set_checked(0, true);
        let err = s.start_pilot(Uuid::from_u128(2), &req(), Timestamp(0), &Live(&[])).unwrap_err();
        assert_eq!(err, SessionError::StreamUnavailable("fpv".into()));
    }

    #[test]
    fn triggers_need_emitters() {
        let mut s = Session::new(Uuid::from_u128(1), config()).unwrap();
        let b = ShortcutBinding::new("t", AnnotationKind::custom("target_change").unwrap(), "target_change", "#123456");
        let gaze = EventSource::StreamEvent("gaze".into());
        assert_eq!(s.register_auto_trigger(gaze.clone(), b.clone()), Err(SessionError::UnknownEventSource(gaze)));
        let slide = EventSource::WizardEvent("slide_changed".into());
        s.register_emitter(slide.clone());
        let id = s.register_auto_trigger(slide.clone(), b).unwrap();
        assert_eq!(s.triggers_for(&slide).next().unwrap().id, id);
        // shortcut keys are emitted by the console
        let b2 = ShortcutBinding::new("m", AnnotationKind::Counter, "mark", "#0000AA");
        assert!(s.register_auto_trigger(EventSource::ShortcutKey("1".into()), b2).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = config();
        c.bindings.push(ShortcutBinding::new("1", AnnotationKind::Note, "note", "#000000"));
        assert!(matches!(Session::new(Uuid::nil(), c), Err(SessionError::Binding(BindingError::DuplicateKey(_)))));
        let mut c = config();
        c.record_inputs = vec!["tpv".into()];
        assert!(matches!(c.validate(), Err(SessionError::InvalidConfig(_))));
    }
}
