//! Flat CSV form of an annotation log.
//!
//! Rows are CRLF-terminated, fields quoted only when needed (RFC 4180).
//! Import attaches every row to the given run id and marks it `Live`, since
//! origin is not part of the schema.

use ::csv::{QuoteStyle, ReaderBuilder, StringRecord, Terminator, WriterBuilder};
use uuid::Uuid;

use super::{AnalyzerError, Selection, SummaryReport};
use crate::session::{Annotation, AnnotationKind, AnnotationPayload, Author, Origin, PilotRun};
use crate::time::Timestamp;

pub const CSV_HEADER: &str = "id,time,media_offset_ms,author,type,function,color,data,notes";
const COLUMNS: [&str; 9] = ["id", "time", "media_offset_ms", "author", "type", "function", "color", "data", "notes"];

fn writer() -> ::csv::Writer<Vec<u8>> {
    WriterBuilder::new()
        .terminator(Terminator::CRLF)
        .quote_style(QuoteStyle::Necessary)
        .from_writer(Vec::new())
}

fn finish(w: ::csv::Writer<Vec<u8>>) -> String {
    let bytes = w.into_inner().expect("in-memory writer");
    String::from_utf8(bytes).expect("fields are UTF-8")
}

/// Writes annotations in canonical order.
pub fn write_csv(annotations: &[Annotation]) -> String {
    let mut sorted: Vec<&Annotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.canonical_cmp(b));
    let mut w = writer();
    w.write_record(COLUMNS).expect("in-memory write");
    for a in sorted {
        let offset = a.media_offset.map(|o| o.to_string()).unwrap_or_default();
        w.write_record([
            a.id.to_string(),
            a.wall_time.to_iso8601(),
            offset,
            a.author.to_string(),
            a.kind.to_string(),
            a.function_name.clone(),
            a.color.clone(),
            a.payload.to_data_field(),
            a.note.clone(),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

pub fn export_csv(run: &PilotRun, selection: &impl Selection) -> Result<String, AnalyzerError> {
    if run.is_running() {
        return Err(AnalyzerError::RunNotStopped(run.id));
    }
    Ok(write_csv(&selection.apply(run.annotations())))
}

fn parse_row(rec: &StringRecord, run_id: Uuid) -> Result<Annotation, String> {
    if rec.len() != COLUMNS.len() {
        return Err(format!("expected {} fields, found {}", COLUMNS.len(), rec.len()));
    }
    let f = |i: usize| &rec[i];
    let id: Uuid = f(0).parse().map_err(|e| format!("id: {e}"))?;
    let wall_time = Timestamp::parse_iso8601(f(1))
        .or_else(|| f(1).parse().ok().map(Timestamp))
        .ok_or_else(|| format!("time: cannot parse `{}`", f(1)))?;
    let media_offset = match f(2) {
        "" => None,
        s => Some(s.parse::<i64>().map_err(|e| format!("media_offset_ms: {e}"))?),
    };
    let author: Author = f(3).parse().map_err(|e| format!("author: {e}"))?;
    let kind: AnnotationKind = f(4).parse().map_err(|e| format!("type: {e}"))?;
    let payload = AnnotationPayload::from_data_field(f(7)).map_err(|e| format!("data: {e}"))?;
    if !kind.accepts(&payload) {
        return Err(format!("data `{}` does not fit type `{kind}`", f(7)));
    }
    Ok(Annotation {
        id,
        run_id,
        author,
        kind,
        function_name: f(5).to_string(),
        color: f(6).to_string(),
        wall_time,
        media_offset,
        payload,
        note: f(8).to_string(),
        origin: Origin::Live,
        time_substituted: false,
    })
}

pub fn import_csv(doc: &str, run_id: Uuid) -> Result<Vec<Annotation>, AnalyzerError> {
    let mut rdr = ReaderBuilder::new().has_headers(false).flexible(true).from_reader(doc.as_bytes());
    let mut rec = StringRecord::new();
    let header_ok = rdr.read_record(&mut rec).map_err(|e| AnalyzerError::BadHeader(e.to_string()))?;
    if !header_ok || rec.iter().ne(COLUMNS) {
        return Err(AnalyzerError::BadHeader(rec.iter().collect::<Vec<_>>().join(",")));
    }
    let mut out = Vec::new();
    loop {
        // Physical line where the next record starts (quoted fields may span
        // lines). After a CRLF the reader sits on the LF, hence the inclusive slice.
        let seen = doc.as_bytes().get(..=rdr.position().byte() as usize).unwrap_or(doc.as_bytes());
        let line = 1 + seen.iter().filter(|b| **b == b'\n').count() as u64;
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => out.push(parse_row(&rec, run_id).map_err(|reason| AnalyzerError::BadRow { line, reason })?),
            Err(e) => return Err(AnalyzerError::BadRow { line, reason: e.to_string() }),
        }
    }
    Ok(out)
}

/// Two-column `metric,value` summary with accuracy to four decimals.
pub fn export_stats_csv(summary: &SummaryReport) -> String {
    let s = &summary.stats;
    let mut w = writer();
    let mut row = |k: &str, v: String| w.write_record([k, v.as_str()]).expect("in-memory write");
    row("metric", "value".into());
    row("correct", s.correct.to_string());
    row("incorrect", s.incorrect.to_string());
    row("counter_total", s.counter_total.to_string());
    row("accuracy", s.accuracy_decimal());
    row("duration_ms", summary.duration_ms.map(|d| d.to_string()).unwrap_or_default());
    for (name, n) in &s.pinned {
        row(&format!("pinned:{name}"), n.to_string());
    }
    finish(w)
}
