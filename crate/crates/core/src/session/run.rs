//! A pilot run and its single-writer annotation log.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use super::annotation::{Annotation, AnnotationKind, AnnotationPayload, Author, Origin};
use super::stats::LiveStats;
use super::SessionError;
use crate::time::Timestamp;

/// What a caller supplies to create an annotation; the run fills in timing
/// fields and counter values.
#[derive(Debug, Clone)]
pub struct NewAnnotation {
    pub id: Uuid,
    pub author: Author,
    pub kind: AnnotationKind,
    pub function_name: String,
    pub color: String,
    pub event_time: Timestamp,
    pub payload: AnnotationPayload,
    pub note: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPatch {
    #[serde(default)]
    pub wall_time: Option<Timestamp>,
    #[serde(default)]
    pub kind: Option<AnnotationKind>,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub media_offset: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    pub field: String,
    pub before: Value,
    pub after: Value,
}

/// One entry of the append-only edit audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub annotation_id: Uuid,
    pub edited_at: Timestamp,
    pub changes: Vec<FieldChange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ElapsedStatus {
    Running,
    AnticipatedElapsed { overrun_ms: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElapsedCheck {
    pub status: ElapsedStatus,
    /// True only on the first check that observed the elapsed state.
    pub notify: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub start_ms: i64,
    pub end_ms: i64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotRun {
    pub id: Uuid,
    pub session_id: Uuid,
    pub participant_id: String,
    pub session_label: String,
    pub anticipated_duration_ms: i64,
    pub start_time: Timestamp,
    pub stop_time: Option<Timestamp>,
    pub archive_ref: Option<Uuid>,
    /// Wall time of media offset 0 (first recorded frame).
    pub recording_start: Option<Timestamp>,
    /// Length of the sealed recording.
    pub recording_duration_ms: Option<i64>,
    /// Function names shown in the live stats bar.
    pub pinned: Vec<String>,
    annotations: Vec<Annotation>,
    audit: Vec<EditRecord>,
    stats: LiveStats,
    elapsed_notified: bool,
}

impl PilotRun {
    pub fn new(
        id: Uuid,
        session_id: Uuid,
        participant_id: impl Into<String>,
        session_label: impl Into<String>,
        anticipated_duration_ms: i64,
        start_time: Timestamp,
        pinned: Vec<String>,
    ) -> Self {
        PilotRun {
            id,
            session_id,
            participant_id: participant_id.into(),
            session_label: session_label.into(),
            anticipated_duration_ms,
            start_time,
            stop_time: None,
            archive_ref: None,
            recording_start: None,
            recording_duration_ms: None,
            stats: LiveStats::empty(&pinned),
            pinned,
            annotations: Vec::new(),
            audit: Vec::new(),
            elapsed_notified: false,
        }
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn audit(&self) -> &[EditRecord] {
        &self.audit
    }

    pub fn is_running(&self) -> bool {
        self.stop_time.is_none()
    }

    pub fn get(&self, id: Uuid) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.id == id)
    }

    /// Recording length when sealed, else stop − start once stopped.
    pub fn duration_ms(&self) -> Option<i64> {
        self.recording_duration_ms
            .or_else(|| self.stop_time.map(|s| s.millis_since(self.start_time)))
    }

    /// Incrementally maintained statistics.
    pub fn stats(&self) -> &LiveStats {
        &self.stats
    }

    /// Statistics recomputed from the log.
    pub fn live_stats(&self) -> LiveStats {
        LiveStats::from_log(&self.annotations, &self.pinned)
    }

    fn media_offset_for(&self, t: Timestamp) -> Option<i64> {
        self.recording_start.map(|s| t.millis_since(s).max(0))
    }

    /// Anchors media time. Annotations made before the anchor existed get
    /// their offsets filled in.
    pub fn set_recording_start(&mut self, start_wall: Timestamp) {
        self.recording_start = Some(start_wall);
        for a in &mut self.annotations {
            if a.media_offset.is_none() {
                a.media_offset = Some(a.wall_time.millis_since(start_wall).max(0));
            }
        }
    }

    pub fn stop(&mut self, at: Timestamp) -> Result<(), SessionError> {
        if !self.is_running() {
            return Err(SessionError::RunNotActive);
        }
        if at <= self.start_time {
            return Err(SessionError::InvalidStop);
        }
        self.stop_time = Some(at);
        Ok(())
    }

    pub fn record(&mut self, new: NewAnnotation) -> Result<Annotation, SessionError> {
        match new.origin {
            Origin::Live | Origin::Auto if !self.is_running() => return Err(SessionError::RunNotActive),
            Origin::Retrospective if self.is_running() => return Err(SessionError::RunNotStopped),
            _ => {}
        }
        let payload = if new.kind == AnnotationKind::Counter {
            match new.payload {
                AnnotationPayload::Empty | AnnotationPayload::Counter { .. } => {
                    AnnotationPayload::Counter { value: self.stats.counter_total + 1 }
                }
                other => return Err(SessionError::PayloadMismatch { kind: new.kind, payload: other.to_data_field() }),
            }
        } else {
            new.payload
        };
        if !new.kind.accepts(&payload) {
            return Err(SessionError::PayloadMismatch { kind: new.kind, payload: payload.to_data_field() });
        }
        if self.annotations.iter().any(|a| a.id == new.id) {
            return Err(SessionError::DuplicateId(new.id));
        }
        let a = Annotation {
            id: new.id,
            run_id: self.id,
            author: new.author,
            media_offset: self.media_offset_for(new.event_time),
            kind: new.kind,
            function_name: new.function_name,
            color: new.color,
            wall_time: new.event_time,
            payload,
            note: new.note,
            origin: new.origin,
            time_substituted: false,
        };
        Ok(self.insert(a))
    }

    /// Marks an annotation whose event time was replaced by its arrival time.
    pub fn flag_time_substituted(&mut self, id: Uuid) -> Option<&Annotation> {
        let idx = self.position(id)?;
        self.annotations[idx].time_substituted = true;
        Some(&self.annotations[idx])
    }

    /// Records an annotation positioned by media offset on a stopped run.
    pub fn record_retrospective(&mut self, mut new: NewAnnotation, media_offset: i64) -> Result<Annotation, SessionError> {
        let duration = self.duration_ms().ok_or(SessionError::RunNotStopped)?;
        if !(0..=duration).contains(&media_offset) {
            return Err(SessionError::OffsetOutOfRange { offset: media_offset, duration });
        }
        let anchor = self.recording_start.unwrap_or(self.start_time);
        new.event_time = anchor + media_offset;
        new.origin = Origin::Retrospective;
        let mut a = self.record(new)?;
        if a.media_offset != Some(media_offset) {
            // no recording anchor: offsets are relative to run start
            let idx = self.position(a.id).expect("just inserted");
            self.annotations[idx].media_offset = Some(media_offset);
            a.media_offset = Some(media_offset);
        }
        Ok(a)
    }

    /// Inserts a fully-formed annotation (used by remote application and
    /// merges) keeping canonical order, stats, and counter numbering.
    pub(crate) fn insert(&mut self, a: Annotation) -> Annotation {
        let idx = self
            .annotations
            .binary_search_by(|x| x.canonical_cmp(&a))
            .unwrap_or_else(|i| i);
        self.stats.add(&a);
        let is_counter = a.kind == AnnotationKind::Counter;
        self.annotations.insert(idx, a);
        if is_counter {
            self.renumber_counters();
        }
        self.annotations[idx].clone()
    }

    /// Replaces the whole log, e.g. after a merge.
    pub(crate) fn replace_log(&mut self, mut log: Vec<Annotation>) {
        log.sort_by(|a, b| a.canonical_cmp(b));
        self.annotations = log;
        self.renumber_counters();
        self.stats = self.live_stats();
    }

    /// Counter payloads are the running total in log order.
    fn renumber_counters(&mut self) {
        let mut n = 0;
        for a in &mut self.annotations {
            if a.kind == AnnotationKind::Counter {
                n += 1;
                a.payload = AnnotationPayload::Counter { value: n };
            }
        }
    }

    fn position(&self, id: Uuid) -> Option<usize> {
        self.annotations.iter().position(|a| a.id == id)
    }

    pub fn edit(&mut self, id: Uuid, patch: &AnnotationPatch, at: Timestamp) -> Result<Annotation, SessionError> {
        if self.is_running() {
            return Err(SessionError::RunNotStopped);
        }
        let idx = self.position(id).ok_or(SessionError::UnknownId(id))?;
        let before = self.annotations[idx].clone();
        let mut after = before.clone();

        if let Some(kind) = &patch.kind {
            let legal = *kind == before.kind
                || matches!(
                    (&before.kind, kind),
                    (AnnotationKind::Correct, AnnotationKind::Incorrect) | (AnnotationKind::Incorrect, AnnotationKind::Correct)
                );
            if !legal {
                return Err(SessionError::IllegalKindChange { from: before.kind.clone(), to: kind.clone() });
            }
            after.kind = kind.clone();
        }
        if let Some(note) = &patch.note {
            after.note = note.clone();
        }
        match (patch.wall_time, patch.media_offset) {
            (Some(t), None) => {
                after.wall_time = t;
                after.media_offset = self.media_offset_for(t).or(before.media_offset.map(|_| t.millis_since(self.start_time).max(0)));
            }
            (None, Some(off)) => {
                after.media_offset = Some(off);
                after.wall_time = self.recording_start.unwrap_or(self.start_time) + off;
            }
            (Some(t), Some(off)) => {
                if self.recording_start.is_some_and(|s| t.millis_since(s) != off) {
                    return Err(SessionError::InconsistentTimes { wall_time: t, media_offset: off });
                }
                after.wall_time = t;
                after.media_offset = Some(off);
            }
            (None, None) => {}
        }

        let changes = diff_fields(&before, &after);
        self.stats.remove(&before);
        self.stats.add(&after);
        self.annotations.remove(idx);
        self.audit.push(EditRecord { annotation_id: id, edited_at: at, changes });
        let inserted = {
            let pos = self
                .annotations
                .binary_search_by(|x| x.canonical_cmp(&after))
                .unwrap_or_else(|i| i);
            self.annotations.insert(pos, after);
            pos
        };
        if before.kind == AnnotationKind::Counter {
            self.renumber_counters();
        }
        Ok(self.annotations[inserted].clone())
    }

    pub fn duration_between(&self, a: Uuid, b: Uuid) -> Result<i64, SessionError> {
        let ta = self.get(a).ok_or(SessionError::UnknownId(a))?.wall_time;
        let tb = self.get(b).ok_or(SessionError::UnknownId(b))?.wall_time;
        Ok((tb.millis_since(ta)).abs())
    }

    /// Once the anticipated duration has elapsed the run stays elapsed; the
    /// notification flag is raised on exactly one call.
    pub fn elapsed_check(&mut self, now: Timestamp) -> ElapsedCheck {
        let overrun = now.millis_since(self.start_time) - self.anticipated_duration_ms;
        if overrun >= 0 || self.elapsed_notified {
            let notify = !self.elapsed_notified;
            self.elapsed_notified = true;
            ElapsedCheck { status: ElapsedStatus::AnticipatedElapsed { overrun_ms: overrun.max(0) }, notify }
        } else {
            ElapsedCheck { status: ElapsedStatus::Running, notify: false }
        }
    }

    /// Adds one voice annotation per utterance. All spans are validated
    /// before anything is inserted.
    pub fn attach_transcripts(
        &mut self,
        utterances: &[Utterance],
        author: &Author,
        ids: &mut dyn FnMut() -> Uuid,
    ) -> Result<Vec<Annotation>, SessionError> {
        let duration = self.duration_ms().ok_or(SessionError::RunNotStopped)?;
        let mut spans: Vec<&Utterance> = utterances.iter().collect();
        spans.sort_by_key(|u| (u.start_ms, u.end_ms));
        for u in &spans {
            if u.start_ms < 0 || u.end_ms > duration || u.start_ms > u.end_ms {
                return Err(SessionError::SpanOutOfRange { start_ms: u.start_ms, end_ms: u.end_ms, duration });
            }
        }
        for w in spans.windows(2) {
            if w[1].start_ms < w[0].end_ms {
                return Err(SessionError::OverlappingSpans { first: (w[0].start_ms, w[0].end_ms), second: (w[1].start_ms, w[1].end_ms) });
            }
        }
        let mut out = Vec::with_capacity(spans.len());
        for u in utterances {
            let new = NewAnnotation {
                id: ids(),
                author: author.clone(),
                kind: AnnotationKind::Voice,
                function_name: "voice".into(),
                color: "#6A5ACD".into(),
                event_time: self.start_time,
                payload: AnnotationPayload::Transcript { text: u.text.clone(), start_ms: u.start_ms, end_ms: u.end_ms },
                note: String::new(),
                origin: Origin::Retrospective,
            };
            out.push(self.record_retrospective(new, u.start_ms)?);
        }
        Ok(out)
    }
}

fn diff_fields(before: &Annotation, after: &Annotation) -> Vec<FieldChange> {
    let (Ok(Value::Object(b)), Ok(Value::Object(a))) = (serde_json::to_value(before), serde_json::to_value(after)) else {
        return Vec::new();
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| FieldChange { field: k.clone(), before: b.get(k).cloned().unwrap_or(Value::Null), after: v.clone() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::annotation::Role;

    pub(crate) const T0: Timestamp = Timestamp(1_700_000_000_000);

    fn run() -> PilotRun {
        let mut r = PilotRun::new(Uuid::from_u128(1), Uuid::from_u128(2), "P1", "direct", 600_000, T0, vec!["correct".into()]);
        r.set_recording_start(T0);
        r
    }

    fn author() -> Author {
        Author::new(Role::SingleUser, "inst-a")
    }

    fn new(n: u128, kind: AnnotationKind, at: i64) -> NewAnnotation {
        NewAnnotation {
            id: Uuid::from_u128(100 + n),
            author: author(),
            function_name: kind.label().to_string(),
            kind,
            color: "#00AA00".into(),
            event_time: T0 + at,
            payload: AnnotationPayload::Empty,
            note: String::new(),
            origin: Origin::Live,
        }
    }

    #[test]
    fn offset_is_event_minus_start() {
        let mut r = run();
        let a = r.record(new(0, AnnotationKind::Correct, 10_000)).unwrap();
        assert_eq!(a.media_offset, Some(10_000));
    }

    #[test]
    fn nine_of_ten() {
        let mut r = run();
        for i in 0..10 {
            let k = if i == 4 { AnnotationKind::Incorrect } else { AnnotationKind::Correct };
            r.record(new(i, k, i as i64 * 1000)).unwrap();
        }
        assert_eq!(r.stats().accuracy, Some(0.9));
        assert_eq!(r.stats(), &r.live_stats());
        assert_eq!(r.stats().pinned["correct"], 9);
    }

    #[test]
    fn counters_carry_running_total() {
        let mut r = run();
        for i in 0..3 {
            r.record(new(i, AnnotationKind::Counter, i as i64 * 10)).unwrap();
        }
        assert_eq!(r.stats().counter_total, 3);
        assert_eq!(r.annotations()[2].payload, AnnotationPayload::Counter { value: 3 });
        // an earlier press shifts later values
        r.record(new(9, AnnotationKind::Counter, 5)).unwrap();
        let vals: Vec<_> = r.annotations().iter().map(|a| a.payload.clone()).collect();
        assert_eq!(vals, (1..=4).map(|value| AnnotationPayload::Counter { value }).collect::<Vec<_>>());
    }

    #[test]
    fn payload_mismatch_and_inactive() {
        let mut r = run();
        let mut bad = new(0, AnnotationKind::Screenshot, 0);
        bad.payload = AnnotationPayload::Empty;
        assert!(matches!(r.record(bad), Err(SessionError::PayloadMismatch { .. })));
        r.stop(T0 + 1000).unwrap();
        assert_eq!(r.record(new(1, AnnotationKind::Correct, 0)), Err(SessionError::RunNotActive));
    }

    #[test]
    fn edits() {
        let mut r = run();
        for i in 0..10 {
            let k = if i == 4 { AnnotationKind::Incorrect } else { AnnotationKind::Correct };
            r.record(new(i, k, i as i64 * 1000)).unwrap();
        }
        let id = Uuid::from_u128(104);
        let patch = AnnotationPatch { note: Some("x".into()), ..Default::default() };
        assert_eq!(r.edit(id, &patch, T0), Err(SessionError::RunNotStopped));
        r.stop(T0 + 20_000).unwrap();

        let before = r.get(id).unwrap().clone();
        let patch = AnnotationPatch { note: Some("neck pain reported".into()), ..Default::default() };
        let after = r.edit(id, &patch, T0 + 30_000).unwrap();
        assert_eq!(after, Annotation { note: "neck pain reported".into(), ..before });

        let patch = AnnotationPatch { kind: Some(AnnotationKind::Correct), ..Default::default() };
        r.edit(id, &patch, T0 + 31_000).unwrap();
        assert_eq!(r.stats().accuracy, Some(1.0));
        assert_eq!(r.stats(), &r.live_stats());
        assert_eq!(r.audit().len(), 2);
        assert_eq!(r.audit()[1].changes[0].field, "kind");
    }

    #[test]
    fn illegal_kind_change_and_unknown_id() {
        let mut r = run();
        let mut s = new(0, AnnotationKind::Screenshot, 0);
        s.payload = AnnotationPayload::Image(crate::media::ImageRef { stream_id: "fpv".into(), seq: 1, region: None });
        r.record(s).unwrap();
        r.stop(T0 + 1000).unwrap();
        let patch = AnnotationPatch { kind: Some(AnnotationKind::Counter), ..Default::default() };
        assert!(matches!(r.edit(Uuid::from_u128(100), &patch, T0), Err(SessionError::IllegalKindChange { .. })));
        assert_eq!(r.edit(Uuid::from_u128(7), &patch, T0), Err(SessionError::UnknownId(Uuid::from_u128(7))));
    }

    #[test]
    fn edit_time_resorts() {
        let mut r = run();
        r.record(new(0, AnnotationKind::Correct, 1000)).unwrap();
        r.record(new(1, AnnotationKind::Incorrect, 2000)).unwrap();
        r.stop(T0 + 5000).unwrap();
        let patch = AnnotationPatch { wall_time: Some(T0 + 3000), ..Default::default() };
        let a = r.edit(Uuid::from_u128(100), &patch, T0).unwrap();
        assert_eq!(a.media_offset, Some(3000));
        assert_eq!(r.annotations()[1].id, Uuid::from_u128(100));
        let patch = AnnotationPatch { wall_time: Some(T0 + 3000), media_offset: Some(10), ..Default::default() };
        assert!(matches!(r.edit(Uuid::from_u128(100), &patch, T0), Err(SessionError::InconsistentTimes { .. })));
    }

    #[test]
    fn durations() {
        let mut r = run();
        let a = r.record(new(0, AnnotationKind::Correct, 1000)).unwrap();
        let b = r.record(new(1, AnnotationKind::Correct, 4500)).unwrap();
        assert_eq!(r.duration_between(a.id, b.id), Ok(3500));
        assert_eq!(r.duration_between(b.id, a.id), Ok(3500));
        assert_eq!(r.duration_between(a.id, a.id), Ok(0));
        assert!(r.duration_between(a.id, Uuid::nil()).is_err());
    }

    #[test]
    fn elapsed_boundaries() {
        let mut r = run();
        assert_eq!(r.elapsed_check(T0 + 599_999).status, ElapsedStatus::Running);
        let c = r.elapsed_check(T0 + 600_000);
        assert_eq!(c, ElapsedCheck { status: ElapsedStatus::AnticipatedElapsed { overrun_ms: 0 }, notify: true });
        let c = r.elapsed_check(T0 + 615_000);
        assert_eq!(c, ElapsedCheck { status: ElapsedStatus::AnticipatedElapsed { overrun_ms: 15_000 }, notify: false });
        // monotone even if the clock steps back
        assert!(matches!(r.elapsed_check(T0).status, ElapsedStatus::AnticipatedElapsed { .. }));
    }

    #[test]
    fn transcripts() {
        let mut r = run();
        r.stop(T0 + 10_000).unwrap();
        let mut n = 0u128;
        let mut ids = || {
            n += 1;
            Uuid::from_u128(500 + n)
        };
        assert_eq!(r.attach_transcripts(&[], &author(), &mut ids).unwrap(), vec![]);
        assert!(r.annotations().is_empty());

        let u = Utterance { start_ms: 2000, end_ms: 3500, text: "tap the top-left".into() };
        let out = r.attach_transcripts(&[u], &author(), &mut ids).unwrap();
        assert_eq!(out[0].media_offset, Some(2000));
        assert_eq!(out[0].kind, AnnotationKind::Voice);
        assert_eq!(out[0].transcript_text(), Some("tap the top-left"));

        let late = Utterance { start_ms: 9000, end_ms: 10_001, text: "late".into() };
        assert!(matches!(r.attach_transcripts(&[late], &author(), &mut ids), Err(SessionError::SpanOutOfRange { .. })));
        let a = Utterance { start_ms: 100, end_ms: 500, text: "a".into() };
        let b = Utterance { start_ms: 400, end_ms: 600, text: "b".into() };
        assert!(matches!(r.attach_transcripts(&[a, b], &author(), &mut ids), Err(SessionError::OverlappingSpans { .. })));
        assert_eq!(r.annotations().len(), 1);
    }

    #[test]
    fn retro_note_bounds() {
        let mut r = run();
        r.stop(T0 + 10_000).unwrap();
        let note = |n| NewAnnotation { kind: AnnotationKind::Note, ..new(n, AnnotationKind::Note, 0) };
        let a = r.record_retrospective(note(0), 0).unwrap();
        assert_eq!((a.media_offset, a.origin), (Some(0), Origin::Retrospective));
        assert!(r.record_retrospective(note(1), 10_000).is_ok());
        assert_eq!(
            r.record_retrospective(note(2), 10_001),
            Err(SessionError::OffsetOutOfRange { offset: 10_001, duration: 10_000 })
        );
    }
}
