//! Self-contained HTML report. Output depends only on the runs and archives
//! passed in, so repeated exports are byte-identical.

use std::fmt::Write;

use base64::Engine;

use super::{compare_selected, AnalyzerError, ComparisonSummary, Selection, SummaryReport};
use crate::media::{image::embeddable, Archive, ImageRef};
use crate::session::PilotRun;

pub struct ReportRun<'a> {
    pub run: &'a PilotRun,
    pub archive: Option<&'a Archive>,
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:4px 8px;vertical-align:top;text-align:left}\
.columns>tbody>tr>td{border:none;padding-right:2em}\
.strip{position:relative;height:18px;background:#eee;margin:8px 0;width:480px}\
.mark{position:absolute;top:0;width:3px;height:18px}\
.shots img{max-width:240px;margin:4px;border:1px solid #999}";

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn fmt_offset(ms: i64) -> String {
    let sign = if ms < 0 { "-" } else { "" };
    let ms = ms.abs();
    format!("{sign}{}:{:02}.{:03}", ms / 60_000, ms / 1000 % 60, ms % 1000)
}

fn image_tag(r: &ImageRef, archive: Option<&Archive>) -> String {
    let rendered = archive.and_then(|a| {
        let frame = a.frame_by_seq(&r.stream_id, r.seq).ok()?;
        embeddable(&frame, r.region.as_ref()).ok()
    });
    match rendered {
        Some((mime, bytes)) => format!(
            "<img alt=\"{}\" src=\"data:{mime};base64,{}\">",
            esc(&r.to_string()),
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ),
        None => format!("<span class=\"missing\">image unavailable: {}</span>", esc(&r.to_string())),
    }
}

fn column(out: &mut String, s: &SummaryReport, run: &ReportRun<'_>) {
    let duration = run.archive.map(Archive::duration_ms).or(s.duration_ms).unwrap_or(0);
    let _ = write!(
        out,
        "<h2>{} / {}</h2>\n<table>\n<tr><th>Run</th><td>{}</td></tr>\n<tr><th>Duration</th><td>{}</td></tr>\n",
        esc(&s.participant_id),
        esc(&s.session_label),
        s.run_id,
        fmt_offset(duration)
    );
    let _ = write!(
        out,
        "<tr><th>Accuracy</th><td class=\"accuracy\">{}</td></tr>\n<tr><th>Correct</th><td>{}</td></tr>\n\
         <tr><th>Incorrect</th><td>{}</td></tr>\n<tr><th>Counter</th><td>{}</td></tr>\n",
        esc(&s.accuracy_display),
        s.stats.correct,
        s.stats.incorrect,
        s.stats.counter_total
    );
    for (name, n) in &s.stats.pinned {
        let _ = writeln!(out, "<tr><th>{}</th><td>{n}</td></tr>", esc(name));
    }
    out.push_str("</table>\n<div class=\"strip\">");
    for a in &s.annotations {
        let Some(o) = a.media_offset else { continue };
        // integer per-mille keeps the position text stable
        let pos = if duration > 0 { o.clamp(0, duration) * 1000 / duration } else { 0 };
        let _ = write!(
            out,
            "<span class=\"mark\" title=\"{} {}\" style=\"left:{}.{}%;background:{}\"></span>",
            esc(&a.kind.to_string()),
            fmt_offset(o),
            pos / 10,
            pos % 10,
            esc(&a.color)
        );
    }
    out.push_str("</div>\n");
    if !s.screenshots.is_empty() {
        out.push_str("<div class=\"shots\">");
        for r in &s.screenshots {
            out.push_str(&image_tag(r, run.archive));
        }
        out.push_str("</div>\n");
    }
    out.push_str("<table class=\"log\">\n<tr><th>Offset</th><th>Author</th><th>Type</th><th>Function</th><th>Data</th><th>Note</th></tr>\n");
    for a in &s.annotations {
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            a.media_offset.map(fmt_offset).unwrap_or_default(),
            esc(&a.author.to_string()),
            esc(&a.kind.to_string()),
            esc(&a.function_name),
            esc(&a.payload.to_data_field()),
            esc(&a.note)
        );
    }
    out.push_str("</table>\n");
}

fn deltas(out: &mut String, cmp: &ComparisonSummary) {
    if cmp.deltas.is_empty() {
        return;
    }
    out.push_str("<h2>Differences from first run</h2>\n<table>\n<tr><th>Run</th><th>Accuracy delta</th><th>Pair</th><th>Mean duration delta (ms)</th></tr>\n");
    for d in &cmp.deltas {
        let acc = d.accuracy_delta.map(|v| format!("{v:.4}")).unwrap_or_else(|| "\u{2014}".into());
        let _ = writeln!(out, "<tr><td>{}</td><td>{acc}</td><td></td><td></td></tr>", d.run_id);
        for p in &d.pair_deltas {
            let _ = writeln!(
                out,
                "<tr><td></td><td></td><td>{} \u{2192} {}</td><td>{:.1}</td></tr>",
                esc(&p.from.to_string()),
                esc(&p.to.to_string()),
                p.delta_ms
            );
        }
    }
    out.push_str("</table>\n");
}

/// One column per run; a difference table follows when there is more than one.
pub fn export_report(runs: &[ReportRun<'_>], selection: &impl Selection) -> Result<String, AnalyzerError> {
    let plain: Vec<&PilotRun> = runs.iter().map(|r| r.run).collect();
    let cmp = compare_selected(&plain, selection)?;
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>Pilot report</title>\n<style>{STYLE}</style>\n</head>\n<body>\n<h1>Pilot report</h1>\n"
    );
    out.push_str("<table class=\"columns\"><tbody><tr>\n");
    for (s, r) in cmp.columns.iter().zip(runs) {
        out.push_str("<td class=\"run\">\n");
        column(&mut out, s, r);
        out.push_str("</td>\n");
    }
    out.push_str("</tr></tbody></table>\n");
    deltas(&mut out, &cmp);
    out.push_str("</body>\n</html>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::AnnotationFilter;
    use super::*;

    #[test]
    fn deterministic_and_shows_percent() {
        let taps: Vec<bool> = (0..10).map(|i| i != 3).collect();
        let r = stopped_run(1, "direct", &taps);
        let one = [ReportRun { run: &r, archive: None }];
        let a = export_report(&one, &AnnotationFilter::default()).unwrap();
        let b = export_report(&one, &AnnotationFilter::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("<td class=\"accuracy\">90%</td>"));
        assert!(!a.contains("http"));
    }

    #[test]
    fn comparison_has_one_column_per_run() {
        let a = stopped_run(1, "direct", &[true, true]);
        let b = stopped_run(2, "indirect", &[true, false]);
        let html = export_report(&[ReportRun { run: &a, archive: None }, ReportRun { run: &b, archive: None }], &AnnotationFilter::default()).unwrap();
        assert_eq!(html.matches("<td class=\"run\">").count(), 2);
        assert!(html.contains("Differences from first run"));
        assert!(html.contains("<td>0.5000</td>"));
    }

    #[test]
    fn escapes_notes() {
        assert_eq!(esc("<b>&\"'"), "&lt;b&gt;&amp;&quot;&#39;");
        assert_eq!(fmt_offset(61_005), "1:01.005");
    }
}
