//! The instance engine: the single writer that owns sessions, runs, the
//! media pipeline, persistence, and the event feed.
//!
//! Every mutation takes the current time as an argument, so the same code
//! runs against the system clock (server) and a virtual clock (simulator).

mod events;
pub mod link;

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::mpsc;
use uuid::Uuid;

pub use events::{EventBus, HarnessEvent};

use crate::analyzer::{self, AnalyzerError, ReportRun, Selection, SummaryReport, Timeline};
use crate::ids::IdSource;
use crate::media::{Archive, Frame, MediaError, MediaPipeline, Region};
use crate::session::{
    is_valid_color, Annotation, AnnotationKind, AnnotationPatch, AnnotationPayload, EventSource, NewAnnotation, Origin, PilotRun,
    Session, SessionConfig, SessionError, ShortcutBinding, StartRequest, TriggerId, Utterance,
};
use crate::store::Store;
use crate::sync::{self, ClockOffset, SyncEnvelope, SyncError};
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
    #[error("unknown run {0}")]
    UnknownRun(Uuid),
    #[error("no binding for key `{0}`")]
    UnknownBinding(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("session not configured: {0}")]
    NotConfigured(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub source: EventSource,
    pub binding: ShortcutBinding,
}

/// A session config plus the event sources and auto-triggers to register
/// right after creation. This is the session file format of the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSetup {
    #[serde(flatten)]
    pub config: SessionConfig,
    #[serde(default)]
    pub emitters: Vec<EventSource>,
    #[serde(default)]
    pub auto_triggers: Vec<TriggerSpec>,
}

impl From<SessionConfig> for SessionSetup {
    fn from(config: SessionConfig) -> Self {
        SessionSetup { config, emitters: Vec::new(), auto_triggers: Vec::new() }
    }
}

/// Body of an annotation submission. Either `key` (a shortcut binding) or
/// `kind` must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    #[serde(default)]
    pub id: Option<Uuid>,
    #[serde(default)]
    pub key: Option<String>,
    #[serde(default)]
    pub kind: Option<AnnotationKind>,
    #[serde(default)]
    pub function_name: Option<String>,
    #[serde(default)]
    pub color: Option<String>,
    /// Keypress time; defaults to arrival time.
    #[serde(default)]
    pub event_time: Option<Timestamp>,
    #[serde(default)]
    pub payload: Option<AnnotationPayload>,
    /// Snapshot source for Screenshot/Focus; defaults to the FPV stream.
    #[serde(default)]
    pub stream_id: Option<String>,
    #[serde(default)]
    pub region: Option<Region>,
    #[serde(default)]
    pub note: String,
    /// Places the annotation on a stopped run at this media offset.
    #[serde(default)]
    pub media_offset: Option<i64>,
}

/// Client keypress times further than this from arrival are replaced by the
/// arrival time.
pub const CLIENT_CLOCK_TOLERANCE_MS: i64 = 2_000;

pub fn default_color(kind: &AnnotationKind) -> &'static str {
    match kind {
        AnnotationKind::Screenshot => "#8B4513",
        AnnotationKind::Focus => "#FF8C00",
        AnnotationKind::Correct => "#00AA00",
        AnnotationKind::Incorrect => "#AA0000",
        AnnotationKind::Counter => "#0000AA",
        AnnotationKind::Voice => "#6A5ACD",
        AnnotationKind::Note => analyzer::RETRO_NOTE_COLOR,
        AnnotationKind::Custom(_) => "#555555",
    }
}

pub struct Engine {
    store: Store,
    media: Arc<MediaPipeline>,
    sessions: BTreeMap<Uuid, Session>,
    runs: BTreeMap<Uuid, PilotRun>,
    archives: BTreeMap<Uuid, Archive>,
    /// Session ids in creation order.
    session_order: Vec<Uuid>,
    ids: Box<dyn IdSource>,
    bus: EventBus,
}

impl Engine {
    /// Opens (or initializes) a data directory and loads what it holds.
    pub fn open(data_dir: impl AsRef<Path>, ids: Box<dyn IdSource>) -> Result<Self> {
        let store = Store::open(data_dir.as_ref())?;
        let media = Arc::new(MediaPipeline::new(store.archives_dir()));
        let mut engine = Engine {
            media,
            sessions: BTreeMap::new(),
            runs: BTreeMap::new(),
            archives: BTreeMap::new(),
            session_order: Vec::new(),
            ids,
            bus: EventBus::default(),
            store,
        };
        for s in engine.store.sessions()? {
            for d in s.config.streams() {
                if engine.media.stream(&d.stream_id).is_none() {
                    // unreachable sources stay closed until reconfigured
                    let _ = engine.media.open_stream(d.clone());
                }
            }
            engine.session_order.push(s.id);
            engine.sessions.insert(s.id, s);
        }
        for r in engine.store.runs()? {
            engine.runs.insert(r.id, r);
        }
        for dir in engine.store.archive_dirs()? {
            let a = Archive::open(dir)?;
            engine.archives.insert(a.id(), a);
        }
        Ok(engine)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn media(&self) -> Arc<MediaPipeline> {
        self.media.clone()
    }

    pub fn subscribe(&mut self) -> mpsc::UnboundedReceiver<HarnessEvent> {
        self.bus.subscribe()
    }

    pub fn next_id(&mut self) -> Uuid {
        self.ids.next_id()
    }

    pub fn session(&self, id: Uuid) -> Result<&Session> {
        self.sessions.get(&id).ok_or(HarnessError::UnknownSession(id))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    /// Most recently created session. After a reload the order falls back to id order.
    pub fn latest_session(&self) -> Option<Uuid> {
        self.session_order.last().copied()
    }

    pub fn run(&self, id: Uuid) -> Result<&PilotRun> {
        self.runs.get(&id).ok_or(HarnessError::UnknownRun(id))
    }

    pub fn runs(&self) -> impl Iterator<Item = &PilotRun> {
        self.runs.values()
    }

    pub fn archive_for(&self, run: &PilotRun) -> Option<&Archive> {
        run.archive_ref.and_then(|id| self.archives.get(&id))
    }

    /// The running run of any session, if there is one.
    pub fn active_run(&self) -> Option<&PilotRun> {
        self.sessions.values().filter_map(|s| s.active_run).find_map(|id| self.runs.get(&id))
    }

    fn publish(&mut self, kind: &str, run_id: Option<Uuid>, data: Value, now: Timestamp) {
        self.bus.publish(kind, run_id, data, now);
    }

    /// Publishes a sync-link notice on the event feed.
    pub fn note_peer(&mut self, kind: &str, data: Value, now: Timestamp) {
        self.publish(kind, None, data, now);
    }

    fn persist_run(&self, id: Uuid) -> Result<()> {
        self.store.save_run(self.run(id)?)?;
        Ok(())
    }

    fn persist_session(&self, id: Uuid) -> Result<()> {
        self.store.save_session(self.session(id)?)?;
        Ok(())
    }

    fn stats_event(&mut self, run_id: Uuid, now: Timestamp) -> Result<()> {
        let stats = serde_json::to_value(self.run(run_id)?.stats()).expect("stats serialize");
        self.publish("stats_updated", Some(run_id), stats, now);
        Ok(())
    }

    pub fn create_session(&mut self, setup: SessionSetup, now: Timestamp) -> Result<Uuid> {
        let id = self.ids.next_id();
        let mut session = Session::new(id, setup.config)?;
        for d in session.config.streams() {
            if self.media.stream(&d.stream_id).is_none() {
                self.media.open_stream(d.clone())?;
            }
        }
        for e in setup.emitters {
            session.register_emitter(e);
        }
        for t in setup.auto_triggers {
            session.register_auto_trigger(t.source, t.binding)?;
        }
        self.sessions.insert(id, session);
        self.session_order.push(id);
        self.persist_session(id)?;
        self.publish("session_created", None, json!({ "session_id": id }), now);
        Ok(id)
    }

    fn session_mut(&mut self, id: Uuid) -> Result<&mut Session> {
        self.sessions.get_mut(&id).ok_or(HarnessError::UnknownSession(id))
    }

    fn run_mut(&mut self, id: Uuid) -> Result<&mut PilotRun> {
        self.runs.get_mut(&id).ok_or(HarnessError::UnknownRun(id))
    }

    pub fn set_checked(&mut self, session_id: Uuid, index: usize, checked: bool) -> Result<()> {
        self.session_mut(session_id)?
            .set_checked(index, checked)
            .ok_or_else(|| HarnessError::BadRequest(format!("no checklist item {index}")))?;
        self.persist_session(session_id)
    }

    pub fn register_emitter(&mut self, session_id: Uuid, source: EventSource) -> Result<()> {
        self.session_mut(session_id)?.register_emitter(source);
        self.persist_session(session_id)
    }

    pub fn register_auto_trigger(&mut self, session_id: Uuid, source: EventSource, binding: ShortcutBinding) -> Result<TriggerId> {
        let id = self.session_mut(session_id)?.register_auto_trigger(source, binding)?;
        self.persist_session(session_id)?;
        Ok(id)
    }

    /// Starts a run and its recording. `run_id` is given when following
    /// another instance's run.
    pub fn start_pilot(&mut self, session_id: Uuid, req: &StartRequest, now: Timestamp, run_id: Option<Uuid>) -> Result<PilotRun> {
        if self.media.is_recording() {
            return Err(MediaError::AlreadyRecording.into());
        }
        let run_id = run_id.unwrap_or_else(|| self.ids.next_id());
        let archive_id = self.ids.next_id();
        let media = self.media.clone();
        let session = self.sessions.get_mut(&session_id).ok_or(HarnessError::UnknownSession(session_id))?;
        let mut run = session.start_pilot(run_id, req, now, media.as_ref())?;
        let streams = session.config.recorded_streams();
        if let Err(e) = media.start_recording(archive_id, run_id, &streams, now) {
            session.active_run = None;
            session.runs.retain(|r| *r != run_id);
            session.phase = crate::session::Phase::Setup;
            return Err(e.into());
        }
        run.archive_ref = Some(archive_id);
        self.runs.insert(run_id, run.clone());
        self.persist_session(session_id)?;
        self.persist_run(run_id)?;
        let data = json!({
            "session_id": session_id,
            "participant_id": run.participant_id,
            "session_label": run.session_label,
            "anticipated_duration_ms": run.anticipated_duration_ms,
            "start_time": run.start_time,
        });
        self.publish("run_started", Some(run_id), data, now);
        self.publish("phase_changed", Some(run_id), json!({ "session_id": session_id, "phase": "pilot" }), now);
        Ok(run)
    }

    /// Copies the recording anchor onto the run once the first frame exists.
    fn sync_anchor(&mut self, run_id: Uuid) {
        let anchor = self.media.recording_start();
        if let (Some(run), Some(t)) = (self.runs.get_mut(&run_id), anchor) {
            if run.is_running() && run.recording_start.is_none() {
                run.set_recording_start(t);
            }
        }
    }

    fn snapshot_payload(&self, run: &PilotRun, stream: &str, at: Timestamp, retro_offset: Option<i64>, region: Option<Region>) -> Result<AnnotationPayload> {
        let image = match retro_offset {
            Some(o) => {
                let archive = self.archive_for(run).ok_or(AnalyzerError::ArchiveMissing(run.id))?;
                let f = archive.frame_at(stream, o)?;
                if let Some(r) = region.filter(|r| !r.fits(f.header.width, f.header.height)) {
                    return Err(MediaError::InvalidRegion(r).into());
                }
                crate::media::ImageRef { stream_id: stream.to_string(), seq: f.seq(), region }
            }
            None => {
                let h = self.media.stream(stream).ok_or_else(|| MediaError::UnknownStream(stream.to_string()))?;
                h.snapshot(at, region)?
            }
        };
        Ok(AnnotationPayload::Image(image))
    }

    pub fn record(&mut self, run_id: Uuid, req: AnnotationRequest, now: Timestamp) -> Result<Annotation> {
        self.record_with_origin(run_id, req, Origin::Live, now)
    }

    fn record_with_origin(&mut self, run_id: Uuid, req: AnnotationRequest, origin: Origin, now: Timestamp) -> Result<Annotation> {
        self.sync_anchor(run_id);
        let run = self.run(run_id)?;
        let session = self.session(run.session_id)?;
        let (kind, function_name, color) = match (&req.key, &req.kind) {
            (Some(key), _) => {
                let b = session.config.binding_for_key(key).ok_or_else(|| HarnessError::UnknownBinding(key.clone()))?;
                (b.kind.clone(), b.name.clone(), b.color.clone())
            }
            (None, Some(kind)) => (
                kind.clone(),
                req.function_name.clone().unwrap_or_else(|| kind.label().to_string()),
                req.color.clone().unwrap_or_else(|| default_color(kind).to_string()),
            ),
            (None, None) => return Err(HarnessError::BadRequest("annotation needs `key` or `kind`".into())),
        };
        if !is_valid_color(&color) {
            return Err(HarnessError::BadRequest(format!("invalid color `{color}`")));
        }
        let (event_time, substituted) = match req.event_time {
            Some(t) if req.media_offset.is_none() && t.millis_since(now).abs() > CLIENT_CLOCK_TOLERANCE_MS => (now, true),
            Some(t) => (t, false),
            None => (now, false),
        };
        let payload = match req.payload {
            Some(p) => p,
            None if matches!(kind, AnnotationKind::Screenshot | AnnotationKind::Focus) => {
                let stream = req.stream_id.clone().unwrap_or_else(|| session.config.fpv_source.stream_id.clone());
                self.snapshot_payload(run, &stream, event_time, req.media_offset, req.region)?
            }
            None => AnnotationPayload::Empty,
        };
        let author = session.config.author();
        let id = req.id.unwrap_or_else(|| self.ids.next_id());
        let new = NewAnnotation { id, author, kind, function_name, color, event_time, payload, note: req.note, origin };
        let run = self.run_mut(run_id)?;
        let mut a = match req.media_offset {
            Some(o) => run.record_retrospective(new, o)?,
            None => run.record(new)?,
        };
        if substituted {
            a = run.flag_time_substituted(a.id).expect("just recorded").clone();
        }
        self.persist_run(run_id)?;
        self.publish("annotation_added", Some(run_id), serde_json::to_value(&a).expect("annotation serializes"), now);
        self.stats_event(run_id, now)?;
        Ok(a)
    }

    /// Fires an event source. Each matching auto-trigger records one `Auto`
    /// annotation on the session's running run.
    pub fn dispatch_event(&mut self, session_id: Uuid, source: &EventSource, now: Timestamp) -> Result<Vec<Annotation>> {
        let session = self.session(session_id)?;
        if !session.has_emitter(source) {
            return Err(SessionError::UnknownEventSource(source.clone()).into());
        }
        let bindings: Vec<ShortcutBinding> = session.triggers_for(source).map(|t| t.binding.clone()).collect();
        let active = session.active_run;
        self.publish("source_event", active, json!({ "session_id": session_id, "source": source }), now);
        let Some(run_id) = active else { return Ok(Vec::new()) };
        let mut out = Vec::new();
        for b in bindings {
            let req = AnnotationRequest {
                kind: Some(b.kind.clone()),
                function_name: Some(b.name.clone()),
                color: Some(b.color.clone()),
                event_time: Some(now),
                ..Default::default()
            };
            out.push(self.record_with_origin(run_id, req, Origin::Auto, now)?);
        }
        Ok(out)
    }

    pub fn stop_run(&mut self, run_id: Uuid, now: Timestamp) -> Result<PilotRun> {
        self.sync_anchor(run_id);
        self.run_mut(run_id)?.stop(now)?;
        let archive = match self.media.stop_recording() {
            Ok(a) => Some(a),
            Err(MediaError::NotRecording) => None,
            Err(e) => return Err(e.into()),
        };
        let run = self.runs.get_mut(&run_id).expect("checked above");
        if let Some(a) = &archive {
            if let Some(s) = a.start_wall() {
                if run.recording_start != Some(s) {
                    run.set_recording_start(s);
                }
            }
            run.recording_duration_ms = Some(a.duration_ms());
            run.archive_ref = Some(a.id());
        }
        let session_id = run.session_id;
        if let Some(a) = archive {
            self.archives.insert(a.id(), a);
        }
        if let Ok(s) = self.session_mut(session_id) {
            if s.active_run == Some(run_id) {
                s.finish_pilot()?;
            }
        }
        self.persist_run(run_id)?;
        if self.sessions.contains_key(&session_id) {
            self.persist_session(session_id)?;
        }
        let run = self.run(run_id)?.clone();
        let data = json!({ "stop_time": run.stop_time, "recording_duration_ms": run.recording_duration_ms });
        self.publish("run_stopped", Some(run_id), data, now);
        self.publish("phase_changed", Some(run_id), json!({ "session_id": session_id, "phase": "analyzer" }), now);
        self.stats_event(run_id, now)?;
        Ok(run)
    }

    pub fn edit(&mut self, run_id: Uuid, annotation_id: Uuid, patch: &AnnotationPatch, now: Timestamp) -> Result<Annotation> {
        let a = self.run_mut(run_id)?.edit(annotation_id, patch, now)?;
        self.persist_run(run_id)?;
        self.publish("annotation_edited", Some(run_id), serde_json::to_value(&a).expect("annotation serializes"), now);
        self.stats_event(run_id, now)?;
        Ok(a)
    }

    pub fn attach_transcripts(&mut self, run_id: Uuid, utterances: &[Utterance], now: Timestamp) -> Result<Vec<Annotation>> {
        let session_id = self.run(run_id)?.session_id;
        let author = self.session(session_id)?.config.author();
        let Engine { runs, ids, .. } = self;
        let run = runs.get_mut(&run_id).ok_or(HarnessError::UnknownRun(run_id))?;
        let added = run.attach_transcripts(utterances, &author, &mut || ids.next_id())?;
        self.persist_run(run_id)?;
        for a in &added {
            self.publish("annotation_added", Some(run_id), serde_json::to_value(a).expect("annotation serializes"), now);
        }
        Ok(added)
    }

    /// Periodic housekeeping: raises the anticipated-duration notification.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Uuid> {
        let active: Vec<Uuid> = self.sessions.values().filter_map(|s| s.active_run).collect();
        let mut fired = Vec::new();
        for id in active {
            let Some(run) = self.runs.get_mut(&id) else { continue };
            let check = run.elapsed_check(now);
            if check.notify {
                self.publish("anticipated_elapsed", Some(id), serde_json::to_value(&check.status).expect("status serializes"), now);
                fired.push(id);
            }
        }
        fired
    }

    pub fn apply_remote(&mut self, run_id: Uuid, env: &SyncEnvelope, offset: &ClockOffset, now: Timestamp) -> Result<Annotation> {
        self.sync_anchor(run_id);
        let before = self.run(run_id)?.annotations().len();
        let a = sync::apply_remote(self.run_mut(run_id)?, env, offset)?;
        if self.run(run_id)?.annotations().len() != before {
            self.persist_run(run_id)?;
            self.publish("annotation_added", Some(run_id), serde_json::to_value(&a).expect("annotation serializes"), now);
            self.stats_event(run_id, now)?;
        }
        Ok(a)
    }

    /// Post-pilot merge of a peer's log into a stopped run.
    pub fn merge_remote(&mut self, run_id: Uuid, remote_log: &[Annotation], offset: &ClockOffset, now: Timestamp) -> Result<PilotRun> {
        let merged = sync::merge_runs(self.run(run_id)?, remote_log, offset)?;
        self.runs.insert(run_id, merged.clone());
        self.persist_run(run_id)?;
        self.publish("run_merged", Some(run_id), json!({ "annotations": merged.annotations().len() }), now);
        self.stats_event(run_id, now)?;
        Ok(merged)
    }

    /// Replaces a replica's log with the authority's merged log.
    pub fn adopt_log(
        &mut self,
        run_id: Uuid,
        authority_log: Vec<Annotation>,
        recording_start: Option<Timestamp>,
        recording_duration_ms: Option<i64>,
        now: Timestamp,
    ) -> Result<()> {
        let mut authority = self.run(run_id)?.clone();
        authority.replace_log(authority_log);
        authority.recording_start = recording_start;
        authority.recording_duration_ms = recording_duration_ms;
        sync::adopt_authority_log(self.run_mut(run_id)?, &authority)?;
        self.persist_run(run_id)?;
        self.publish("run_merged", Some(run_id), json!({ "annotations": authority.annotations().len() }), now);
        self.stats_event(run_id, now)?;
        Ok(())
    }

    pub fn add_retro_note(&mut self, run_id: Uuid, media_offset: i64, text: &str, now: Timestamp) -> Result<Annotation> {
        let req = AnnotationRequest {
            kind: Some(AnnotationKind::Note),
            color: Some(analyzer::RETRO_NOTE_COLOR.into()),
            note: text.to_string(),
            media_offset: Some(media_offset),
            ..Default::default()
        };
        self.record_with_origin(run_id, req, Origin::Retrospective, now)
    }

    pub fn timeline(&self, run_id: Uuid) -> Result<Timeline> {
        let run = self.run(run_id)?;
        Ok(analyzer::build_timeline(run, self.archive_for(run))?)
    }

    pub fn summary(&self, run_id: Uuid, selection: &impl Selection) -> Result<SummaryReport> {
        Ok(analyzer::summarize_selected(self.run(run_id)?, selection)?)
    }

    pub fn export_csv(&self, run_id: Uuid, selection: &impl Selection) -> Result<String> {
        Ok(analyzer::export_csv(self.run(run_id)?, selection)?)
    }

    pub fn export_report(&self, run_ids: &[Uuid], selection: &impl Selection) -> Result<String> {
        let runs = run_ids
            .iter()
            .map(|id| self.run(*id).map(|run| ReportRun { run, archive: self.archive_for(run) }))
            .collect::<Result<Vec<_>>>()?;
        Ok(analyzer::export_report(&runs, selection)?)
    }

    /// Archived frame shown at `media_offset` of a stopped run.
    pub fn frame_at(&self, run_id: Uuid, stream: &str, media_offset: i64) -> Result<Frame> {
        let run = self.run(run_id)?;
        let archive = self.archive_for(run).ok_or(AnalyzerError::ArchiveMissing(run_id))?;
        Ok(archive.frame_at(stream, media_offset)?)
    }
}
