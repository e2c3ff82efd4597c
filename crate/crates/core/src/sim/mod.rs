//! Deterministic stand-in for the headset, room camera, participant, and
//! wizard. A [`SimScript`] drives real ingestion and annotation paths, and
//! the resulting [`SimReport`] compares system tallies with ground truth.

pub mod link;
pub mod push;

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use link::{estimate_over_link, paired_run, LinkStats, PairedReport, Side, SimLink};

use crate::harness::{AnnotationRequest, Engine, HarnessError, SessionSetup, TriggerSpec};
use crate::media::{image::encode_jpeg, Frame, FrameEncoding, StreamDescriptor};
use crate::session::{
    AnnotationKind, ChecklistItem, EventSource, Origin, PilotRun, Role, Session, SessionConfig, ShortcutBinding, StartRequest, Utterance,
};
use crate::time::Timestamp;

/// Wall-clock time of script offset 0.
pub const SIM_EPOCH: Timestamp = Timestamp(1_714_564_800_000);
pub const SLIDE_EVENT: &str = "slide_changed";
pub const FRAME_WIDTH: u32 = 32;
pub const FRAME_HEIGHT: u32 = 24;
/// Length given to a scripted utterance unless the next one starts sooner.
pub const UTTERANCE_MS: i64 = 1500;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("script is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("server answered {status} {code}: {message}")]
    Remote { status: u16, code: String, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    #[serde(default)]
    pub mean_ms: i64,
    #[serde(default)]
    pub jitter_ms: i64,
    /// Added to every message from the authority to the peer.
    #[serde(default)]
    pub asymmetry_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SimAction {
    SlideChange { n: u32 },
    ParticipantTap { correct: bool },
    Utterance { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub at_ms: i64,
    #[serde(flatten)]
    pub action: SimAction,
}

/// Replaces parts of the computed ground truth. Only useful for negative
/// controls that must fail.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectOverride {
    pub correct: Option<u64>,
    pub incorrect: Option<u64>,
    pub auto: Option<u64>,
    pub voice: Option<u64>,
    pub trial_durations_ms: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScript {
    pub seed: u64,
    pub fps: f64,
    pub duration_ms: i64,
    #[serde(default)]
    pub events: Vec<SimEvent>,
    #[serde(default)]
    pub skew_ms: i64,
    #[serde(default)]
    pub latency: Latency,
    #[serde(default)]
    pub expect: Option<ExpectOverride>,
}

impl SimScript {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: SimScript = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScript(m));
        if !self.fps.is_finite() || self.fps <= 0.0 {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.duration_ms < 0 {
            return bad(format!("duration_ms must not be negative, got {}", self.duration_ms));
        }
        if let Some(w) = self.events.windows(2).find(|w| w[1].at_ms < w[0].at_ms) {
            return bad(format!("events out of order at {} ms", w[1].at_ms));
        }
        if let Some(e) = self.events.iter().find(|e| e.at_ms < 0 || e.at_ms > self.duration_ms) {
            return bad(format!("event at {} ms is outside 0..={}", e.at_ms, self.duration_ms));
        }
        let l = &self.latency;
        if l.jitter_ms < 0 || l.asymmetry_ms < 0 || l.mean_ms < l.jitter_ms {
            return bad("latency needs mean_ms >= jitter_ms >= 0 and asymmetry_ms >= 0".into());
        }
        Ok(())
    }

    /// Script offsets of every generated frame.
    pub fn frame_times(&self) -> impl Iterator<Item = i64> + '_ {
        (0u64..)
            .map(|i| (i as f64 * 1000.0 / self.fps).floor() as i64)
            .take_while(|t| *t < self.duration_ms)
    }

    pub fn frame_count(&self) -> u64 {
        self.frame_times().count() as u64
    }

    /// The "Mind the Tap" replication: ten target changes, each followed by
    /// one tap, nine of them correct, plus two think-aloud utterances.
    pub fn mind_the_tap(seed: u64) -> Self {
        let mut events = Vec::new();
        for k in 0..10i64 {
            let at = 2_000 + k * 5_500;
            events.push(SimEvent { at_ms: at, action: SimAction::SlideChange { n: k as u32 + 1 } });
            events.push(SimEvent { at_ms: at + 1_200 + 100 * k, action: SimAction::ParticipantTap { correct: k != 6 } });
        }
        events.push(SimEvent { at_ms: 20_500, action: SimAction::Utterance { text: "the menu is on the floor".into() } });
        events.push(SimEvent { at_ms: 45_000, action: SimAction::Utterance { text: "which one was it".into() } });
        events.sort_by_key(|e| e.at_ms);
        SimScript {
            seed,
            fps: 15.0,
            duration_ms: 60_000,
            events,
            skew_ms: 0,
            latency: Latency::default(),
            expect: None,
        }
    }
}

/// Session used by `sim` when no session file is given.
pub fn default_setup(role: Role, instance_id: &str) -> SessionSetup {
    let slide = EventSource::WizardEvent(SLIDE_EVENT.into());
    let target = AnnotationKind::custom("target_change").expect("valid custom kind");
    SessionSetup {
        config: SessionConfig {
            session_name: "mind the tap".into(),
            role,
            instance_id: instance_id.into(),
            fpv_source: StreamDescriptor::new("fpv", "sim://fpv", 15.0),
            tpv_source: Some(StreamDescriptor::new("tpv", "sim://tpv", 15.0)),
            wizarding_url: "sim://slides".into(),
            checklist: vec![ChecklistItem::new("Check foot visibility")],
            bindings: vec![
                ShortcutBinding::new("1", AnnotationKind::Correct, "correct", "#00AA00").pinned(),
                ShortcutBinding::new("2", AnnotationKind::Incorrect, "incorrect", "#AA0000").pinned(),
                ShortcutBinding::new("3", AnnotationKind::Screenshot, "screenshot", "#8B4513"),
                ShortcutBinding::new("4", AnnotationKind::Counter, "mark", "#0000AA"),
            ],
            record_inputs: vec![],
            observer_drives_wizard: false,
        },
        emitters: vec![slide.clone()],
        auto_triggers: vec![TriggerSpec { source: slide, binding: ShortcutBinding::new("t", target, "target change", "#222222") }],
    }
}

fn hue_rgb(h: u32) -> [u8; 3] {
    let h = h % 360;
    let x = (255 * (60 - (h % 120).abs_diff(60)) / 60) as u8;
    match h / 60 {
        0 => [255, x, 0],
        1 => [x, 255, 0],
        2 => [0, 255, x],
        3 => [0, x, 255],
        4 => [x, 0, 255],
        _ => [255, 0, x],
    }
}

/// Test-pattern frames for one stream. Background hue follows `seq`; the
/// top row carries `seq` as 32 black/white bits.
pub fn pattern_stream(script: &SimScript, stream_id: &str) -> Vec<Frame> {
    let base = (script.seed % 360) as u32;
    script
        .frame_times()
        .enumerate()
        .map(|(i, t)| {
            let seq = i as u64 + 1;
            let bg = Rgb(hue_rgb(base + (seq as u32).wrapping_mul(7)));
            let mut img = RgbImage::from_pixel(FRAME_WIDTH, FRAME_HEIGHT, bg);
            for bit in 0..32 {
                let on = (seq >> (31 - bit)) & 1 == 1;
                img.put_pixel(bit, 0, Rgb(if on { [255; 3] } else { [0; 3] }));
            }
            let jpeg = encode_jpeg(&img).expect("in-memory jpeg encoding");
            Frame::new(stream_id, seq, SIM_EPOCH + t, (FRAME_WIDTH, FRAME_HEIGHT), FrameEncoding::Jpeg, jpeg)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u64,
    pub incorrect: u64,
    pub auto: u64,
    pub voice: u64,
    /// Target change to the first tap before the next change.
    pub trial_durations_ms: Vec<i64>,
}

impl Tally {
    pub fn accuracy(&self) -> Option<f64> {
        let n = self.correct + self.incorrect;
        (n > 0).then(|| self.correct as f64 / n as f64)
    }

    fn diff(&self, observed: &Tally) -> Vec<String> {
        let mut out = Vec::new();
        let mut cmp = |name: &str, e: u64, o: u64| {
            if e != o {
                out.push(format!("{name}: expected {e}, observed {o}"));
            }
        };
        cmp("correct", self.correct, observed.correct);
        cmp("incorrect", self.incorrect, observed.incorrect);
        cmp("auto", self.auto, observed.auto);
        cmp("voice", self.voice, observed.voice);
        if self.trial_durations_ms != observed.trial_durations_ms {
            out.push(format!("trial_durations_ms: expected {:?}, observed {:?}", self.trial_durations_ms, observed.trial_durations_ms));
        }
        out
    }
}

fn trials(changes: &[i64], taps: &[i64]) -> Vec<i64> {
    changes
        .iter()
        .enumerate()
        .filter_map(|(k, &s)| {
            let end = changes.get(k + 1).copied().unwrap_or(i64::MAX);
            taps.iter().find(|&&t| t >= s && t < end).map(|t| t - s)
        })
        .collect()
}

/// Ground truth straight from the script.
pub fn expected_tally(script: &SimScript) -> Tally {
    let mut t = Tally::default();
    let (mut changes, mut taps) = (Vec::new(), Vec::new());
    for e in &script.events {
        match e.action {
            SimAction::SlideChange { .. } => {
                t.auto += 1;
                changes.push(e.at_ms);
            }
            SimAction::ParticipantTap { correct } => {
                if correct {
                    t.correct += 1
                } else {
                    t.incorrect += 1
                }
                taps.push(e.at_ms);
            }
            SimAction::Utterance { .. } => t.voice += 1,
        }
    }
    t.trial_durations_ms = trials(&changes, &taps);
    if let Some(o) = &script.expect {
        t.correct = o.correct.unwrap_or(t.correct);
        t.incorrect = o.incorrect.unwrap_or(t.incorrect);
        t.auto = o.auto.unwrap_or(t.auto);
        t.voice = o.voice.unwrap_or(t.voice);
        if let Some(d) = &o.trial_durations_ms {
            t.trial_durations_ms = d.clone();
        }
    }
    t
}

/// What the system recorded, read back from the run's log and stats.
pub fn observed_tally(run: &PilotRun) -> Tally {
    let stats = run.stats();
    let mut t = Tally { correct: stats.correct, incorrect: stats.incorrect, ..Default::default() };
    let (mut changes, mut taps) = (Vec::new(), Vec::new());
    for a in run.annotations() {
        let at = a.media_offset.unwrap_or(0);
        match a.kind {
            AnnotationKind::Voice => t.voice += 1,
            AnnotationKind::Correct | AnnotationKind::Incorrect => taps.push(at),
            _ if a.origin == Origin::Auto => {
                t.auto += 1;
                changes.push(at);
            }
            _ => {}
        }
    }
    t.trial_durations_ms = trials(&changes, &taps);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub run_id: Uuid,
    pub expected: Tally,
    pub observed: Tally,
    pub expected_accuracy: Option<f64>,
    pub observed_accuracy: Option<f64>,
    pub expected_frames: u64,
    pub frames_recorded: u64,
    pub expected_archive_duration_ms: i64,
    pub archive_duration_ms: i64,
    pub matches: bool,
    pub diff: Vec<String>,
}

/// One scheduled step of a scripted run.
#[derive(Debug, Clone)]
pub enum Step {
    Frame(Frame),
    Event(SimEvent),
}

/// Frames for every configured stream interleaved with script events, in
/// time order. Frames go first on ties so a tap at `t` can see frame `t`.
pub fn schedule(script: &SimScript, stream_ids: &[String]) -> Vec<(i64, Step)> {
    let mut steps: Vec<(i64, u8, usize, Step)> = Vec::new();
    for (k, id) in stream_ids.iter().enumerate() {
        for f in pattern_stream(script, id) {
            steps.push((f.capture_time().millis_since(SIM_EPOCH), 0, k, Step::Frame(f)));
        }
    }
    for (k, e) in script.events.iter().enumerate() {
        steps.push((e.at_ms, 1, k, Step::Event(e.clone())));
    }
    steps.sort_by_key(|(t, class, k, _)| (*t, *class, *k));
    steps.into_iter().map(|(t, _, _, s)| (t, s)).collect()
}

/// Keys of the bindings the simulated wizard presses for taps.
#[derive(Debug, Clone)]
pub struct TapKeys {
    pub correct: String,
    pub incorrect: String,
}

pub fn tap_keys(config: &SessionConfig) -> Result<TapKeys, HarnessError> {
    let key = |kind: AnnotationKind| {
        config
            .bindings
            .iter()
            .find(|b| b.kind == kind)
            .map(|b| b.key.clone())
            .ok_or_else(|| HarnessError::NotConfigured(format!("no binding of kind {kind}")))
    };
    Ok(TapKeys { correct: key(AnnotationKind::Correct)?, incorrect: key(AnnotationKind::Incorrect)? })
}

/// Applies one script event to a running session. Utterances are returned
/// instead, because transcripts attach after the run stops.
pub fn apply_event(engine: &mut Engine, session_id: Uuid, run_id: Uuid, keys: &TapKeys, e: &SimEvent, now: Timestamp) -> Result<(), HarnessError> {
    match &e.action {
        SimAction::SlideChange { .. } => {
            engine.dispatch_event(session_id, &EventSource::WizardEvent(SLIDE_EVENT.into()), now)?;
        }
        SimAction::ParticipantTap { correct } => {
            let key = if *correct { &keys.correct } else { &keys.incorrect };
            engine.record(run_id, AnnotationRequest { key: Some(key.clone()), event_time: Some(now), ..Default::default() }, now)?;
        }
        SimAction::Utterance { .. } => {}
    }
    Ok(())
}

/// Transcript spans for the script's utterances, clamped to the recording.
pub fn utterances(script: &SimScript, recording_ms: i64) -> Vec<Utterance> {
    let said: Vec<(i64, &str)> = script
        .events
        .iter()
        .filter_map(|e| match &e.action {
            SimAction::Utterance { text } => Some((e.at_ms, text.as_str())),
            _ => None,
        })
        .collect();
    said.iter()
        .enumerate()
        .map(|(k, (at, text))| {
            let next = said.get(k + 1).map_or(i64::MAX, |n| n.0);
            let start = (*at).min(recording_ms);
            let end = (at + UTTERANCE_MS).min(next).min(recording_ms).max(start);
            Utterance { start_ms: start, end_ms: end, text: text.to_string() }
        })
        .collect()
}

/// Checks a session has what a scripted run needs.
pub fn check_session(session: &Session) -> Result<TapKeys, HarnessError> {
    if !session.has_trigger_for(&EventSource::WizardEvent(SLIDE_EVENT.into())) {
        return Err(HarnessError::NotConfigured(format!("no auto-trigger on wizard event `{SLIDE_EVENT}`")));
    }
    tap_keys(&session.config)
}

/// Checks the session can run the script and ticks its checklist.
pub fn prepare_session(engine: &mut Engine, session_id: Uuid) -> Result<TapKeys, HarnessError> {
    let session = engine.session(session_id)?;
    let keys = check_session(session)?;
    for i in 0..session.config.checklist.len() {
        engine.set_checked(session_id, i, true)?;
    }
    Ok(keys)
}

pub fn start_request(script: &SimScript) -> StartRequest {
    StartRequest { participant_id: format!("sim-{}", script.seed), session_label: "scripted".into(), anticipated_duration_ms: script.duration_ms }
}

/// Drives a whole run in-process against `engine` and compares the outcome
/// with the script's ground truth.
pub fn scripted_run(engine: &mut Engine, script: &SimScript, session_id: Uuid) -> Result<SimReport, SimError> {
    script.validate()?;
    let keys = prepare_session(engine, session_id)?;
    let streams = engine.session(session_id)?.config.recorded_streams();
    let run_id = engine.start_pilot(session_id, &start_request(script), SIM_EPOCH, None)?.id;
    let media = engine.media();
    for (t, step) in schedule(script, &streams) {
        let now = SIM_EPOCH + t;
        match step {
            Step::Frame(f) => {
                let stream = f.stream_id().to_string();
                media.ingest(&stream, f.into(), now).map_err(HarnessError::from)?;
            }
            Step::Event(e) => apply_event(engine, session_id, run_id, &keys, &e, now)?,
        }
        engine.tick(now);
    }
    let run = engine.stop_run(run_id, SIM_EPOCH + script.duration_ms.max(1))?;
    let said = utterances(script, run.duration_ms().unwrap_or(0));
    if !said.is_empty() {
        engine.attach_transcripts(run_id, &said, SIM_EPOCH + script.duration_ms.max(1))?;
    }
    Ok(report(engine, script, run_id, streams.len() as u64)?)
}

pub fn report(engine: &Engine, script: &SimScript, run_id: Uuid, stream_count: u64) -> Result<SimReport, HarnessError> {
    let run = engine.run(run_id)?;
    let archive = engine.archive_for(run);
    let frames_recorded: u64 = archive
        .map(|a| a.streams().filter_map(|s| a.index(s)).map(|i| i.len() as u64).sum())
        .unwrap_or(0);
    let archive_duration_ms = archive.map(|a| a.duration_ms()).unwrap_or(0);
    Ok(build_report(script, run, stream_count, frames_recorded, archive_duration_ms))
}

/// Compares a finished run and its archive figures with the script.
pub fn build_report(script: &SimScript, run: &PilotRun, stream_count: u64, frames_recorded: u64, archive_duration_ms: i64) -> SimReport {
    let times: Vec<i64> = script.frame_times().collect();
    let expected_archive_duration_ms = match (times.first(), times.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    let expected = expected_tally(script);
    let observed = observed_tally(run);
    let expected_frames = script.frame_count() * stream_count;
    let mut diff = expected.diff(&observed);
    if expected_frames != frames_recorded {
        diff.push(format!("frames: expected {expected_frames}, recorded {frames_recorded}"));
    }
    if expected_archive_duration_ms != archive_duration_ms {
        diff.push(format!("archive_duration_ms: expected {expected_archive_duration_ms}, observed {archive_duration_ms}"));
    }
    SimReport {
        run_id: run.id,
        expected_accuracy: expected.accuracy(),
        observed_accuracy: observed.accuracy(),
        expected,
        observed,
        expected_frames,
        frames_recorded,
        expected_archive_duration_ms,
        archive_duration_ms,
        matches: diff.is_empty(),
        diff,
    }
}

/// Per-stream frame counts in a sealed archive, used to compare runs.
pub fn frame_counts(engine: &Engine, run_id: Uuid) -> Result<BTreeMap<String, usize>, HarnessError> {
    let run = engine.run(run_id)?;
    Ok(engine
        .archive_for(run)
        .map(|a| a.streams().map(|s| (s.to_string(), a.index(s).map_or(0, <[_]>::len))).collect())
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SeededIds;

    #[test]
    fn frame_spacing_floors() {
        let s = SimScript { seed: 1, fps: 15.0, duration_ms: 1000, events: vec![], skew_ms: 0, latency: Latency::default(), expect: None };
        let times: Vec<i64> = s.frame_times().collect();
        // independent oracle: integer arithmetic
        let oracle: Vec<i64> = (0..15).map(|i| i * 1000 / 15).collect();
        assert_eq!(times, oracle);
        assert_eq!(times[..3], [0, 66, 133]);
        assert_eq!(*times.last().unwrap(), 933);
        let empty = SimScript { duration_ms: 0, ..s.clone() };
        assert!(pattern_stream(&empty, "fpv").is_empty());
    }

    #[test]
    fn frames_are_deterministic_and_self_describing() {
        let s = SimScript { seed: 9, fps: 30.0, duration_ms: 200, events: vec![], skew_ms: 0, latency: Latency::default(), expect: None };
        let a = pattern_stream(&s, "fpv");
        let b = pattern_stream(&s, "fpv");
        assert_eq!(a, b);
        let f = &a[2];
        assert_eq!((f.seq(), f.capture_time()), (3, SIM_EPOCH + 66));
        let img = image::load_from_memory(&f.bytes).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (FRAME_WIDTH, FRAME_HEIGHT));
    }

    #[test]
    fn validation() {
        let mut s = SimScript::mind_the_tap(1);
        s.validate().unwrap();
        s.events.swap(0, 1);
        assert!(matches!(s.validate(), Err(SimError::InvalidScript(_))));
        let bad = r#"{"seed":1,"fps":0,"duration_ms":10}"#;
        assert!(matches!(SimScript::from_json(bad), Err(SimError::InvalidScript(_))));
        assert!(matches!(SimScript::from_json("{"), Err(SimError::Parse(_))));
        let late = r#"{"seed":1,"fps":5,"duration_ms":10,"events":[{"at_ms":11,"type":"slide_change","n":1}]}"#;
        assert!(SimScript::from_json(late).is_err());
    }

    #[test]
    fn expected_tallies_from_script() {
        let t = expected_tally(&SimScript::mind_the_tap(1));
        assert_eq!((t.correct, t.incorrect, t.auto, t.voice), (9, 1, 10, 2));
        assert_eq!(t.accuracy(), Some(0.9));
        assert_eq!(t.trial_durations_ms, (0..10).map(|k| 1_200 + 100 * k).collect::<Vec<_>>());
        let empty = SimScript { events: vec![], ..SimScript::mind_the_tap(1) };
        assert_eq!(expected_tally(&empty), Tally::default());
    }

    #[test]
    fn short_scripted_run_matches() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Engine::open(dir.path(), Box::new(SeededIds::new(4))).unwrap();
        let sid = e.create_session(default_setup(Role::Wizard, "w1"), SIM_EPOCH).unwrap();
        let s = SimScript {
            seed: 2,
            fps: 10.0,
            duration_ms: 3_000,
            events: vec![
                SimEvent { at_ms: 100, action: SimAction::SlideChange { n: 1 } },
                SimEvent { at_ms: 900, action: SimAction::ParticipantTap { correct: false } },
                SimEvent { at_ms: 2_999, action: SimAction::Utterance { text: "hm".into() } },
            ],
            skew_ms: 0,
            latency: Latency::default(),
            expect: None,
        };
        let r = scripted_run(&mut e, &s, sid).unwrap();
        assert!(r.matches, "{:?}", r.diff);
        assert_eq!(r.frames_recorded, 60);
        assert_eq!(r.archive_duration_ms, 2_900);
        assert_eq!(r.observed.trial_durations_ms, vec![800]);
    }

    #[test]
    fn missing_trigger_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Engine::open(dir.path(), Box::new(SeededIds::new(4))).unwrap();
        let mut setup = default_setup(Role::Wizard, "w1");
        setup.auto_triggers.clear();
        let sid = e.create_session(setup, SIM_EPOCH).unwrap();
        let err = scripted_run(&mut e, &SimScript::mind_the_tap(1), sid).unwrap_err();
        assert!(matches!(err, SimError::Harness(HarnessError::NotConfigured(_))));
    }
}
