//! Post-pilot analysis over stopped runs: timeline, filters, summaries,
//! comparison, retrospective additions, and exports.

mod csv;
mod filter;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use self::csv::{export_csv, export_stats_csv, import_csv, write_csv, CSV_HEADER};
pub use filter::{AnnotationFilter, Conjunction, Selection};
pub use report::{export_report, ReportRun};

use crate::media::{Archive, ImageRef, MediaError, Region};
use crate::session::{Annotation, AnnotationKind, AnnotationPayload, Author, LiveStats, NewAnnotation, Origin, PilotRun, SessionError};

pub const RETRO_NOTE_COLOR: &str = "#F5C542";
pub const RETRO_SCREENSHOT_COLOR: &str = "#4A90D9";

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("run {0} has no sealed archive")]
    ArchiveMissing(Uuid),
    #[error("no runs to compare")]
    EmptyRunList,
    #[error("run {0} is still running")]
    RunNotStopped(Uuid),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("bad CSV header: {0:?}")]
    BadHeader(String),
    #[error("bad CSV row at line {line}: {reason}")]
    BadRow { line: u64, reason: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Media(#[from] MediaError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub media_offset: i64,
    pub annotation_id: Uuid,
    pub kind: AnnotationKind,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub run_id: Uuid,
    pub duration_ms: i64,
    pub markers: Vec<Marker>,
}

fn require_stopped(run: &PilotRun) -> Result<(), AnalyzerError> {
    if run.is_running() {
        return Err(AnalyzerError::RunNotStopped(run.id));
    }
    Ok(())
}

/// One marker per annotation that has a media offset, positioned by the
/// archive's own wall-to-media mapping.
pub fn build_timeline(run: &PilotRun, archive: Option<&Archive>) -> Result<Timeline, AnalyzerError> {
    require_stopped(run)?;
    let archive = archive.ok_or(AnalyzerError::ArchiveMissing(run.id))?;
    let duration = archive.duration_ms();
    let mut markers = Vec::new();
    for a in run.annotations() {
        let Some(own) = a.media_offset else { continue };
        let media_offset = match archive.wall_to_media(a.wall_time) {
            Ok(o) => o,
            Err(MediaError::NotAnchored) => own.clamp(0, duration),
            Err(e) => return Err(e.into()),
        };
        markers.push(Marker { media_offset, annotation_id: a.id, kind: a.kind.clone(), color: a.color.clone() });
    }
    markers.sort_by_key(|m| m.media_offset);
    Ok(Timeline { run_id: run.id, duration_ms: duration, markers })
}

/// Subset of the run log, canonical order preserved.
pub fn filter_annotations(run: &PilotRun, f: &impl Selection) -> Vec<Annotation> {
    f.apply(run.annotations())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDuration {
    pub from: AnnotationKind,
    pub to: AnnotationKind,
    pub mean_ms: f64,
    pub samples: u64,
}

/// For each ordered kind pair (A, B): the mean time from an A annotation to
/// the next B annotation after it in log order.
pub fn pair_durations(log: &[Annotation]) -> Vec<PairDuration> {
    let mut acc: BTreeMap<(AnnotationKind, AnnotationKind), (i64, u64)> = BTreeMap::new();
    for (i, a) in log.iter().enumerate() {
        let mut seen: Vec<&AnnotationKind> = Vec::new();
        for b in &log[i + 1..] {
            if seen.contains(&&b.kind) {
                continue;
            }
            seen.push(&b.kind);
            let e = acc.entry((a.kind.clone(), b.kind.clone())).or_default();
            e.0 += b.wall_time.millis_since(a.wall_time);
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((from, to), (sum, n))| PairDuration { from, to, mean_ms: sum as f64 / n as f64, samples: n })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteEntry {
    pub annotation_id: Uuid,
    pub media_offset: Option<i64>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub run_id: Uuid,
    pub participant_id: String,
    pub session_label: String,
    pub duration_ms: Option<i64>,
    pub stats: LiveStats,
    pub accuracy_percent: Option<u64>,
    pub accuracy_display: String,
    pub screenshots: Vec<ImageRef>,
    pub notes: Vec<NoteEntry>,
    pub pair_durations: Vec<PairDuration>,
    pub annotations: Vec<Annotation>,
}

pub fn summarize(run: &PilotRun) -> Result<SummaryReport, AnalyzerError> {
    summarize_selected(run, &AnnotationFilter::default())
}

/// Statistics are recounted from the selected annotations only, so they
/// always agree with the list they ship with.
pub fn summarize_selected(run: &PilotRun, selection: &impl Selection) -> Result<SummaryReport, AnalyzerError> {
    require_stopped(run)?;
    let annotations = filter_annotations(run, selection);
    let stats = LiveStats::from_log(&annotations, &run.pinned);
    let screenshots = annotations.iter().filter_map(|a| a.payload.image().cloned()).collect();
    let notes = annotations
        .iter()
        .filter(|a| !a.note.is_empty())
        .map(|a| NoteEntry { annotation_id: a.id, media_offset: a.media_offset, text: a.note.clone() })
        .collect();
    Ok(SummaryReport {
        run_id: run.id,
        participant_id: run.participant_id.clone(),
        session_label: run.session_label.clone(),
        duration_ms: run.duration_ms(),
        accuracy_percent: stats.accuracy_percent(),
        accuracy_display: stats.accuracy_display(),
        pair_durations: pair_durations(&annotations),
        stats,
        screenshots,
        notes,
        annotations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub from: AnnotationKind,
    pub to: AnnotationKind,
    pub delta_ms: f64,
}

/// Differences of one run against the first (baseline) run: `baseline − other`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDelta {
    pub run_id: Uuid,
    pub accuracy_delta: Option<f64>,
    /// Reduced `(numerator, denominator)` of the exact accuracy difference.
    pub accuracy_delta_exact: Option<(i64, u64)>,
    pub pair_deltas: Vec<PairDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub columns: Vec<SummaryReport>,
    pub deltas: Vec<RunDelta>,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn accuracy_delta(base: &LiveStats, other: &LiveStats) -> Option<(i64, u64)> {
    let (c1, t1) = base.accuracy_ratio()?;
    let (c2, t2) = other.accuracy_ratio()?;
    let num = (c1 * t2) as i64 - (c2 * t1) as i64;
    let den = t1 * t2;
    let g = gcd(num.unsigned_abs(), den).max(1);
    Some((num / g as i64, den / g))
}

pub fn compare(runs: &[&PilotRun]) -> Result<ComparisonSummary, AnalyzerError> {
    compare_selected(runs, &AnnotationFilter::default())
}

pub fn compare_selected(runs: &[&PilotRun], selection: &impl Selection) -> Result<ComparisonSummary, AnalyzerError> {
    let columns = runs.iter().map(|r| summarize_selected(r, selection)).collect::<Result<Vec<_>, _>>()?;
    let base = columns.first().ok_or(AnalyzerError::EmptyRunList)?;
    let deltas = columns[1..]
        .iter()
        .map(|other| {
            let exact = accuracy_delta(&base.stats, &other.stats);
            let pair_deltas = base
                .pair_durations
                .iter()
                .filter_map(|p| {
                    let q = other.pair_durations.iter().find(|q| q.from == p.from && q.to == p.to)?;
                    Some(PairDelta { from: p.from.clone(), to: p.to.clone(), delta_ms: p.mean_ms - q.mean_ms })
                })
                .collect();
            RunDelta {
                run_id: other.run_id,
                accuracy_delta: exact.map(|(n, d)| n as f64 / d as f64),
                accuracy_delta_exact: exact,
                pair_deltas,
            }
        })
        .collect();
    Ok(ComparisonSummary { columns, deltas })
}

/// Adds a Note at `media_offset` on a stopped run.
pub fn add_retro_note(run: &mut PilotRun, id: Uuid, author: Author, media_offset: i64, text: &str) -> Result<Annotation, AnalyzerError> {
    let new = NewAnnotation {
        id,
        author,
        kind: AnnotationKind::Note,
        function_name: "note".into(),
        color: RETRO_NOTE_COLOR.into(),
        event_time: run.start_time,
        payload: AnnotationPayload::Empty,
        note: text.to_string(),
        origin: Origin::Retrospective,
    };
    Ok(run.record_retrospective(new, media_offset)?)
}

/// Adds a Screenshot of the archived frame shown at `media_offset`.
pub fn add_retro_screenshot(
    run: &mut PilotRun,
    archive: &Archive,
    id: Uuid,
    author: Author,
    stream_id: &str,
    media_offset: i64,
    region: Option<Region>,
) -> Result<Annotation, AnalyzerError> {
    let frame = archive.frame_at(stream_id, media_offset)?;
    if let Some(r) = region {
        if !r.fits(frame.header.width, frame.header.height) {
            return Err(MediaError::InvalidRegion(r).into());
        }
    }
    let new = NewAnnotation {
        id,
        author,
        kind: AnnotationKind::Screenshot,
        function_name: "screenshot".into(),
        color: RETRO_SCREENSHOT_COLOR.into(),
        event_time: run.start_time,
        payload: AnnotationPayload::Image(ImageRef { stream_id: stream_id.into(), seq: frame.seq(), region }),
        note: String::new(),
        origin: Origin::Retrospective,
    };
    Ok(run.record_retrospective(new, media_offset)?)
}
