//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use woz_harness::analyzer::{export_csv, export_report, import_csv, write_csv, AnnotationFilter, ReportRun, CSV_HEADER};
use woz_harness::harness::Engine;
use woz_harness::ids::SeededIds;
use woz_harness::session::{AnnotationKind, Origin, Role};
use woz_harness::sim::{self, estimate_over_link, paired_run, Latency, SimAction, SimScript};
use woz_harness::sync::{merge_runs, union_logs, ClockOffset};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mind_the_tap() -> Outcome {
    let started = Instant::now();
    let script = SimScript::mind_the_tap(2024);
    let taps: Vec<bool> = script
        .events
        .iter()
        .filter_map(|e| match e.action {
            SimAction::ParticipantTap { correct } => Some(correct),
            _ => None,
        })
        .collect();
    let slides = script.events.iter().filter(|e| matches!(e.action, SimAction::SlideChange { .. })).count();
    ensure(taps.len() == 10 && taps.iter().filter(|c| **c).count() == 9 && slides == 10, || "script shape".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut engine = Engine::open(dir.path(), Box::new(SeededIds::new(script.seed))).map_err(|e| e.to_string())?;
    let session = engine.create_session(sim::default_setup(Role::Wizard, "wizard"), sim::SIM_EPOCH).map_err(|e| e.to_string())?;
    ensure(engine.session(session).unwrap().config.streams().count() == 2, || "expected FPV and TPV".into())?;
    let report = sim::scripted_run(&mut engine, &script, session).map_err(|e| e.to_string())?;
    let run = engine.run(report.run_id).unwrap();

    ensure(run.stats().accuracy_ratio() == Some((9, 10)), || format!("accuracy ratio {:?}", run.stats().accuracy_ratio()))?;
    ensure(run.stats().accuracy == Some(0.9), || format!("accuracy {:?}", run.stats().accuracy))?;
    let auto = run
        .annotations()
        .iter()
        .filter(|a| a.origin == Origin::Auto && a.kind == AnnotationKind::custom("target_change").unwrap())
        .count();
    ensure(auto == 10, || format!("{auto} auto target-change annotations"))?;
    let duration = engine.archive_for(run).map(|a| a.duration_ms()).ok_or("no archive")?;
    ensure((duration - 60_000).abs() <= 67, || format!("archive duration {duration}"))?;
    ensure(report.matches, || format!("tallies differ: {:?}", report.diff))?;
    let elapsed = started.elapsed();
    ensure(elapsed.as_secs_f64() < 90.0, || format!("took {elapsed:?}"))?;
    Ok(format!("accuracy 0.9, 10 auto, archive {duration} ms, {:.2} s", elapsed.as_secs_f64()))
}

fn stats_oracle() -> Outcome {
    let config = Config { cases: 1_000, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let checked = std::cell::Cell::new(0u64);
    let result = runner.run(&op_sequence(), |(live, post)| {
        checked.set(checked.get() + 1);
        play(&live, &post).map(|_| ()).map_err(proptest::test_runner::TestCaseError::fail)
    });
    match result {
        Ok(()) => Ok(format!("{} sequences, incremental == recount, counters 1..n", checked.get())),
        Err(e) => Err(e.to_string()),
    }
}

fn clock_sync() -> Outcome {
    let mut worst_asym: f64 = 0.0;
    for skew in [-500i64, 0, 60, 1_000] {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let latency = Latency { mean_ms: rng.random_range(0..80), jitter_ms: rng.random_range(0..40), asymmetry_ms: 0 };
            let (at_a, at_b) = estimate_over_link(latency, skew, seed);
            let (a, b) = (at_a.ok_or("no estimate at A")?, at_b.ok_or("no estimate at B")?);
            ensure(a.offset_ms == skew as f64 && b.offset_ms == -(skew as f64), || {
                format!("skew {skew} seed {seed}: estimated {} / {}", a.offset_ms, b.offset_ms)
            })?;
            for asym in [10i64, 30, 75] {
                let latency = Latency { asymmetry_ms: asym, ..latency };
                let (at_a, _) = estimate_over_link(latency, skew, seed);
                let err = (at_a.ok_or("no estimate")?.offset_ms - skew as f64).abs();
                ensure(err <= asym as f64 / 2.0, || format!("skew {skew} asym {asym} seed {seed}: error {err}"))?;
                worst_asym = worst_asym.max(err / asym as f64);
            }
        }
    }
    Ok(format!("400 symmetric trials exact, 1200 asymmetric trials within a/2 (worst {worst_asym:.2}a)"))
}

fn merge_algebra() -> Outcome {
    let run_id = id(5);
    let canon = |log: Vec<woz_harness::session::Annotation>| write_csv(&union_logs(&log));
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_log(&mut rng, run_id, 30);
        let b = random_log(&mut rng, run_id, 30);
        let c = random_log(&mut rng, run_id, 30);
        let ab = union_logs(a.iter().chain(&b));
        let ba = union_logs(b.iter().chain(&a));
        ensure(ab == ba, || format!("seed {seed}: not commutative"))?;
        ensure(union_logs(ab.iter().chain(&b)) == ab, || format!("seed {seed}: not idempotent"))?;
        let left = union_logs(ab.iter().chain(&c));
        let bc = union_logs(b.iter().chain(&c));
        ensure(left == union_logs(a.iter().chain(&bc)), || format!("seed {seed}: not associative"))?;
        let ids: BTreeSet<_> = a.iter().chain(&b).map(|x| x.id).collect();
        ensure(ab.iter().map(|x| x.id).collect::<BTreeSet<_>>() == ids && ab.len() == ids.len(), || format!("seed {seed}: id set"))?;
        let dup = union_logs(a.iter().chain(&a).chain(&b).chain(&b));
        ensure(dup == ab, || format!("seed {seed}: duplicate delivery changed the result"))?;

        let mut base = fresh_run(run_id);
        base.stop(T0 + 30_000).map_err(|e| e.to_string())?;
        let zero = ClockOffset::ZERO;
        let m1 = merge_runs(&merge_runs(&base, &a, &zero).unwrap(), &b, &zero).unwrap();
        let m2 = merge_runs(&merge_runs(&base, &b, &zero).unwrap(), &a, &zero).unwrap();
        let csv1 = export_csv(&m1, &AnnotationFilter::default()).unwrap();
        ensure(csv1 == export_csv(&m2, &AnnotationFilter::default()).unwrap(), || format!("seed {seed}: run merge order matters"))?;
        ensure(export_csv(&merge_runs(&m1, &b, &zero).unwrap(), &AnnotationFilter::default()).unwrap() == csv1, || {
            format!("seed {seed}: run merge not idempotent")
        })?;
        ensure(canon(a.iter().chain(&b).cloned().collect()) == canon(b.iter().chain(&a).cloned().collect()), || {
            format!("seed {seed}: csv differs")
        })?;
    }

    let mut paired = 0;
    for seed in [11u64, 12, 13] {
        let mut script = SimScript::mind_the_tap(seed);
        script.fps = 5.0;
        script.duration_ms = 30_000;
        script.events.retain(|e| e.at_ms <= script.duration_ms);
        script.skew_ms = [-240, 90, 700][paired];
        script.latency = Latency { mean_ms: 15, jitter_ms: 10, asymmetry_ms: 0 };
        let (w, o) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let r = paired_run(&script, w.path(), o.path(), 0.3).map_err(|e| e.to_string())?;
        ensure(r.converged && r.wizard_csv == r.observer_csv, || format!("paired seed {seed} did not converge"))?;
        ensure(r.observer_marks > 0 && r.wizard_csv.contains("observer:"), || format!("paired seed {seed}: observer marks missing"))?;
        paired += 1;
    }
    Ok(format!("500 cases idempotent/commutative/associative/dedup, {paired} lossy paired runs byte-identical"))
}

fn time_mapping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut offsets = Vec::new();
    let mut t = rng.random_range(0..40);
    for _ in 0..900 {
        offsets.push(t);
        t += rng.random_range(1..120);
    }
    let dir = tempfile::tempdir().unwrap();
    let archive = archive_with_frames(dir.path(), &offsets);
    let start = archive.start_wall().ok_or("archive not anchored")?;
    let index = archive.index("fpv").unwrap().to_vec();
    ensure(index.len() == offsets.len(), || "frames lost".into())?;
    for e in &index {
        let o = archive.wall_to_media(e.capture_time).map_err(|e| e.to_string())?;
        let f = archive.frame_at("fpv", o).map_err(|e| e.to_string())?;
        ensure(f.seq() == e.seq && f.capture_time() == e.capture_time, || format!("frame {} maps to {}", e.seq, f.seq()))?;
    }
    let duration = archive.duration_ms();
    for _ in 0..10_000 {
        let o = rng.random_range(0..=duration);
        let f = archive.frame_at("fpv", o).map_err(|e| e.to_string())?;
        let want = scan_oracle(&archive, start + o);
        ensure(Some(f.seq()) == want, || format!("offset {o}: got {}, oracle {want:?}", f.seq()))?;
        let next = index.iter().find(|e| e.capture_time > f.capture_time());
        ensure(f.capture_time() <= start + o && next.is_none_or(|n| n.capture_time > start + o), || format!("offset {o}: floor violated"))?;
    }
    ensure(archive.frame_at("fpv", duration + 1).is_err() && archive.frame_at("fpv", -1).is_err(), || "out-of-range offsets accepted".into())?;
    Ok(format!("{} frames identity, 10000 queries match the scan oracle", index.len()))
}

fn csv_round_trip() -> Outcome {
    let mut rows = 0;
    for seed in 0..200u64 {
        let run = random_run(seed);
        let first = export_csv(&run, &AnnotationFilter::default()).map_err(|e| e.to_string())?;
        ensure(first.starts_with(&format!("{CSV_HEADER}\r\n")), || format!("seed {seed}: header {:?}", first.lines().next()))?;
        let back = import_csv(&first, run.id).map_err(|e| e.to_string())?;
        ensure(back.len() == run.annotations().len(), || format!("seed {seed}: row count"))?;
        let second = write_csv(&back);
        ensure(first == second, || format!("seed {seed}: export differs after import"))?;
        rows += back.len();
    }
    ensure(CSV_HEADER == "id,time,media_offset_ms,author,type,function,color,data,notes", || "header text".into())?;
    Ok(format!("200 runs, {rows} rows byte-stable"))
}

fn percent_oracle(c: u64, i: u64) -> String {
    let total = c + i;
    let (q, r) = (100 * c / total, 100 * c % total);
    format!("{}%", if 2 * r >= total { q + 1 } else { q })
}

fn report_determinism() -> Outcome {
    let cases = [(9u64, 1u64), (1, 7), (5, 3), (2, 1), (1, 199), (0, 4), (3, 0)];
    for (c, i) in cases {
        let mut run = fresh_run(id(900 + c as u128 * 1_000 + i as u128));
        let mut n = 0;
        for k in 0..(c + i) {
            n += 1;
            let kind = if k < c { AnnotationKind::Correct } else { AnnotationKind::Incorrect };
            run.record(new_ann(id(5_000 + n), author(0), kind, T0 + k as i64 * 100, "")).unwrap();
        }
        run.stop(T0 + 60_000).unwrap();
        let rr = [ReportRun { run: &run, archive: None }];
        let a = export_report(&rr, &AnnotationFilter::default()).map_err(|e| e.to_string())?;
        let b = export_report(&rr, &AnnotationFilter::default()).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{c}/{i}: report differs between exports"))?;
        let want = format!("<td class=\"accuracy\">{}</td>", percent_oracle(c, i));
        ensure(a.contains(&want), || format!("{c}/{i}: missing {want}"))?;
    }
    let run = random_run(3);
    let rr = [ReportRun { run: &run, archive: None }];
    ensure(
        export_report(&rr, &AnnotationFilter::default()).unwrap() == export_report(&rr, &AnnotationFilter::default()).unwrap(),
        || "random run report differs".into(),
    )?;
    Ok(format!("{} tallies, byte-identical, half-up percent", cases.len()))
}

fn negative_control() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/perturbed_tally.json");
    let out = Command::new(env!("CARGO_BIN_EXE_harness"))
        .args(["--data-dir"])
        .arg(dir.path())
        .args(["sim", "--script", fixture])
        .output()
        .map_err(|e| e.to_string())?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| format!("stdout is not JSON: {e}"))?;
    ensure(out.status.code() == Some(1), || format!("exit code {:?}", out.status.code()))?;
    ensure(report["matches"] == false && report["diff"].as_array().is_some_and(|d| !d.is_empty()), || "report lacks a diff".into())?;
    ensure(stderr.contains("correct: expected 10, observed 9"), || format!("stderr: {stderr}"))?;
    Ok("exit 1 with diff".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("end-to-end Mind the Tap", mind_the_tap),
        ("stats oracle", stats_oracle),
        ("clock sync", clock_sync),
        ("merge algebra", merge_algebra),
        ("time mapping", time_mapping),
        ("CSV round-trip", csv_round_trip),
        ("report determinism", report_determinism),
        ("negative control", negative_control),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL: {why}", n + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
