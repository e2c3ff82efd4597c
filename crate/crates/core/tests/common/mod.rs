#![allow(dead_code)]

use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;
use woz_harness::harness::default_color;
use woz_harness::media::{Archive, Frame, FrameEncoding, ImageRef, MediaPipeline, StreamDescriptor};
use woz_harness::session::{
    Annotation, AnnotationKind, AnnotationPatch, AnnotationPayload, Author, NewAnnotation, Origin, PilotRun, Role,
};
use woz_harness::Timestamp;

pub const T0: Timestamp = Timestamp(1_700_000_000_000);
pub const PINNED: [&str; 3] = ["correct", "incorrect", "mark"];

pub fn id(n: u128) -> Uuid {
    Uuid::from_u128(n)
}

pub fn author(k: u8) -> Author {
    match k % 3 {
        0 => Author::new(Role::Wizard, "w"),
        1 => Author::new(Role::Observer, "o1"),
        _ => Author::new(Role::Observer, "o2"),
    }
}

pub fn kind(k: u8) -> AnnotationKind {
    match k % 6 {
        0 => AnnotationKind::Correct,
        1 => AnnotationKind::Incorrect,
        2 => AnnotationKind::Counter,
        3 => AnnotationKind::Note,
        4 => AnnotationKind::custom("mark").unwrap(),
        _ => AnnotationKind::custom("target_change").unwrap(),
    }
}

pub fn function_of(kind: &AnnotationKind) -> String {
    match kind {
        AnnotationKind::Custom(name) => name.clone(),
        k => k.label().to_string(),
    }
}

pub fn new_ann(id: Uuid, who: Author, kind: AnnotationKind, t: Timestamp, note: &str) -> NewAnnotation {
    NewAnnotation {
        id,
        author: who,
        function_name: function_of(&kind),
        color: default_color(&kind).to_string(),
        kind,
        event_time: t,
        payload: AnnotationPayload::Empty,
        note: note.to_string(),
        origin: Origin::Live,
    }
}

pub fn fresh_run(run_id: Uuid) -> PilotRun {
    let mut run = PilotRun::new(run_id, id(0), "p", "label", 60_000, T0, PINNED.iter().map(|s| s.to_string()).collect());
    run.set_recording_start(T0);
    run
}

/// Brute-force tallies, computed without `LiveStats`.
#[derive(Debug, PartialEq)]
pub struct Recount {
    pub correct: u64,
    pub incorrect: u64,
    pub counters: u64,
    pub pinned: Vec<(String, u64)>,
    pub accuracy: Option<f64>,
}

pub fn recount(log: &[Annotation]) -> Recount {
    let count = |k: AnnotationKind| log.iter().filter(|a| a.kind == k).count() as u64;
    let correct = count(AnnotationKind::Correct);
    let incorrect = count(AnnotationKind::Incorrect);
    let mut pinned: Vec<(String, u64)> =
        PINNED.iter().map(|p| (p.to_string(), log.iter().filter(|a| a.function_name == *p).count() as u64)).collect();
    pinned.sort();
    Recount {
        correct,
        incorrect,
        counters: count(AnnotationKind::Counter),
        pinned,
        accuracy: (correct + incorrect > 0).then(|| correct as f64 / (correct + incorrect) as f64),
    }
}

pub fn stats_match(run: &PilotRun) -> Result<(), String> {
    let s = run.stats();
    let want = recount(run.annotations());
    let got = Recount {
        correct: s.correct,
        incorrect: s.incorrect,
        counters: s.counter_total,
        pinned: s.pinned.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        accuracy: s.accuracy,
    };
    if got != want {
        return Err(format!("incremental {got:?} != recount {want:?}"));
    }
    let values: Vec<u64> = run
        .annotations()
        .iter()
        .filter_map(|a| match a.payload {
            AnnotationPayload::Counter { value } => Some(value),
            _ => None,
        })
        .collect();
    if values != (1..=values.len() as u64).collect::<Vec<_>>() {
        return Err(format!("counter values {values:?} are not 1..n"));
    }
    let sorted = run.annotations().windows(2).all(|w| {
        (w[0].wall_time, &w[0].author.instance, w[0].id) <= (w[1].wall_time, &w[1].author.instance, w[1].id)
    });
    if !sorted {
        return Err("log is not in canonical order".into());
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Op {
    Record { kind: u8, dt: i64, who: u8 },
    Edit { pick: usize, flip: bool, note: Option<String>, shift: Option<i64> },
    Retro { kind: u8, offset: i64 },
}

pub fn live_op() -> impl Strategy<Value = Op> {
    (any::<u8>(), 0i64..3_000, any::<u8>()).prop_map(|(kind, dt, who)| Op::Record { kind, dt, who })
}

pub fn post_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (any::<usize>(), any::<bool>(), proptest::option::of("[a-z ,\"]{0,8}"), proptest::option::of(0i64..50_000))
            .prop_map(|(pick, flip, note, shift)| Op::Edit { pick, flip, note, shift }),
        (any::<u8>(), 0i64..=50_000).prop_map(|(kind, offset)| Op::Retro { kind, offset }),
    ]
}

pub fn op_sequence() -> impl Strategy<Value = (Vec<Op>, Vec<Op>)> {
    (proptest::collection::vec(live_op(), 0..40), proptest::collection::vec(post_op(), 0..25))
}

/// Plays a sequence and checks stats against the recount after every step.
pub fn play(live: &[Op], post: &[Op]) -> Result<PilotRun, String> {
    let mut run = fresh_run(id(1));
    let mut next = 100u128;
    let mut t = T0;
    for op in live {
        if let Op::Record { kind: k, dt, who } = op {
            t = t + *dt;
            next += 1;
            run.record(new_ann(id(next), author(*who), kind(*k), t, "")).map_err(|e| e.to_string())?;
            stats_match(&run)?;
        }
    }
    run.stop(T0 + 50_000).map_err(|e| e.to_string())?;
    let mut edit_time = T0 + 60_000;
    for op in post {
        match op {
            Op::Edit { pick, flip, note, shift } => {
                if run.annotations().is_empty() {
                    continue;
                }
                let target = run.annotations()[pick % run.annotations().len()].clone();
                let mut patch = AnnotationPatch { note: note.clone(), ..Default::default() };
                if *flip {
                    patch.kind = match target.kind {
                        AnnotationKind::Correct => Some(AnnotationKind::Incorrect),
                        AnnotationKind::Incorrect => Some(AnnotationKind::Correct),
                        _ => None,
                    };
                }
                patch.media_offset = *shift;
                edit_time = edit_time + 1;
                run.edit(target.id, &patch, edit_time).map_err(|e| e.to_string())?;
            }
            Op::Retro { kind: k, offset } => {
                next += 1;
                run.record_retrospective(new_ann(id(next), author(0), kind(*k), T0, "retro"), *offset).map_err(|e| e.to_string())?;
            }
            Op::Record { .. } => {}
        }
        stats_match(&run)?;
    }
    Ok(run)
}

/// A stopped run whose log exercises every payload and awkward CSV text.
pub fn random_run(seed: u64) -> PilotRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = fresh_run(id(seed as u128 + 1));
    let n = rng.random_range(0..30);
    let notes = ["", "plain", "comma, inside", "quote \"here\"", "line\nbreak", "ünïcødé", " padded "];
    let mut t = T0;
    for k in 0..n {
        t = t + rng.random_range(0..2_000);
        let kind = match rng.random_range(0..8) {
            0..=4 => self::kind(rng.random()),
            5 => AnnotationKind::Screenshot,
            6 => AnnotationKind::Focus,
            _ => AnnotationKind::custom("target_change").unwrap(),
        };
        let mut new = new_ann(id(((seed as u128) << 32) + 10 + k), author(rng.random()), kind.clone(), t, notes[rng.random_range(0..notes.len())]);
        if matches!(kind, AnnotationKind::Screenshot | AnnotationKind::Focus) {
            let region = (kind == AnnotationKind::Focus).then_some(woz_harness::media::Region { x: 1, y: 2, w: 3, h: 4 });
            new.payload = AnnotationPayload::Image(ImageRef { stream_id: "fpv".into(), seq: rng.random_range(0..500), region });
        }
        run.record(new).unwrap();
    }
    run.stop(t + 1_000).unwrap();
    let said = rng.random_range(0..3u64);
    if said > 0 {
        let utterances: Vec<_> = (0..said)
            .map(|k| woz_harness::session::Utterance { start_ms: k as i64 * 400, end_ms: k as i64 * 400 + 300, text: format!("said, \"{k}\"") })
            .collect();
        let mut n = 0u128;
        let mut ids = || {
            n += 1;
            id(((seed as u128) << 32) + 9_000 + n)
        };
        run.attach_transcripts(&utterances, &author(1), &mut ids).unwrap();
    }
    run
}

/// Random annotation log for one run, drawn from a shared id pool so pairs
/// overlap and sometimes disagree.
pub fn random_log(rng: &mut ChaCha8Rng, run_id: Uuid, pool: u128) -> Vec<Annotation> {
    let n = rng.random_range(0..25);
    (0..n)
        .map(|_| {
            let k = kind(rng.random());
            let t = T0 + rng.random_range(0..20_000);
            Annotation {
                id: id(1_000 + rng.random_range(0..pool)),
                run_id,
                author: author(rng.random()),
                function_name: function_of(&k),
                color: default_color(&k).to_string(),
                payload: if k == AnnotationKind::Counter { AnnotationPayload::Counter { value: 1 } } else { AnnotationPayload::Empty },
                kind: k,
                wall_time: t,
                media_offset: Some(t.millis_since(T0)),
                note: if rng.random_bool(0.3) { "n".into() } else { String::new() },
                origin: if rng.random_bool(0.5) { Origin::Live } else { Origin::Remote },
                time_substituted: false,
            }
        })
        .collect()
}

/// Records frames at the given script offsets into a sealed archive.
pub fn archive_with_frames(root: &Path, offsets: &[i64]) -> Archive {
    let media = MediaPipeline::new(root);
    media.open_stream(StreamDescriptor::new("fpv", "sim://fpv", 30.0)).unwrap();
    media.start_recording(id(77), id(78), &["fpv".to_string()], T0).unwrap();
    for (seq, o) in offsets.iter().enumerate() {
        let f = Frame::new("fpv", seq as u64 + 1, T0 + *o, (1, 1), FrameEncoding::RawRgb, vec![seq as u8, 0, 0]);
        media.ingest("fpv", f.into(), T0 + *o).unwrap();
    }
    media.stop_recording().unwrap()
}

/// Latest entry with capture time at or before `t`, by linear scan.
pub fn scan_oracle(archive: &Archive, t: Timestamp) -> Option<u64> {
    archive.index("fpv").unwrap().iter().filter(|e| e.capture_time <= t).map(|e| e.seq).next_back()
}
