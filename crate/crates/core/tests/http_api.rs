use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use uuid::Uuid;
use woz_harness::cli::{cmd_export, sim_in_process, Format};
use woz_harness::harness::Engine;
use woz_harness::ids::SeededIds;
use woz_harness::media::mjpeg::{self, MultipartParser};
use woz_harness::media::{Frame, FrameEncoding};
use woz_harness::server::{router, AppState};
use woz_harness::session::Role;
use woz_harness::sim::push::PushClient;
use woz_harness::sim::{self, SimScript};
use woz_harness::time::SystemClock;
use woz_harness::Timestamp;

struct Server {
    base: String,
    engine: Arc<Mutex<Engine>>,
    _dir: tempfile::TempDir,
}

async fn spawn(seed: u64, token: Option<&str>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let engine = Arc::new(Mutex::new(Engine::open(dir.path(), Box::new(SeededIds::new(seed))).unwrap()));
    let state = AppState::new(engine.clone(), Arc::new(SystemClock), token.map(String::from));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    Server { base: format!("http://{addr}"), engine, _dir: dir }
}

impl Server {
    fn dir(&self) -> &Path {
        self._dir.path()
    }
}

fn short_script(seed: u64) -> SimScript {
    let mut s = SimScript::mind_the_tap(seed);
    s.fps = 5.0;
    s.duration_ms = 25_000;
    s.events.retain(|e| e.at_ms <= 25_000);
    s
}

fn archive_hash(engine: &Engine, run: Uuid) -> String {
    let run = engine.run(run).unwrap();
    engine.archive_for(run).unwrap().content_hash().unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn pushing_over_http_matches_the_in_process_run() {
    let script = short_script(31);
    let local = tempfile::tempdir().unwrap();
    let want = sim_in_process(local.path(), &script, sim::default_setup(Role::Wizard, "wizard")).unwrap();
    let want_hash = archive_hash(&Engine::open(local.path(), Box::new(SeededIds::new(0))).unwrap(), want.run_id);
    let want_csv = cmd_export(local.path(), want.run_id, Format::Csv, None, &[]).unwrap();

    let server = spawn(script.seed, None).await;
    let client = PushClient::new(&server.base, None);
    let session = client.create_session(&sim::default_setup(Role::Wizard, "wizard")).await.unwrap();
    let got = client.scripted_run(&script, session).await.unwrap();
    assert_eq!(got, want);
    assert!(got.matches, "{:?}", got.diff);
    assert_eq!(archive_hash(&server.engine.lock().unwrap(), got.run_id), want_hash);

    let served = client.export_csv(got.run_id).await.unwrap();
    assert_eq!(served, want_csv);
    assert_eq!(cmd_export(server.dir(), got.run_id, Format::Csv, None, &[]).unwrap(), served);
}

#[tokio::test(flavor = "multi_thread")]
async fn token_is_required_when_configured() {
    let server = spawn(1, Some("s3cret")).await;
    let http = reqwest::Client::new();
    let health = format!("{}/health", server.base);
    let resp = http.get(&health).send().await.unwrap();
    assert_eq!(resp.status(), 401);
    assert_eq!(resp.json::<Value>().await.unwrap()["error"], "Unauthorized");
    assert_eq!(http.get(&health).bearer_auth("wrong").send().await.unwrap().status(), 401);
    assert_eq!(http.get(&health).bearer_auth("s3cret").send().await.unwrap().status(), 200);
    assert_eq!(http.get(format!("{health}?token=s3cret")).send().await.unwrap().status(), 200);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_carry_a_code_and_status() {
    let server = spawn(2, None).await;
    let http = reqwest::Client::new();
    let get = |path: String| http.get(format!("{}{path}", server.base)).send();

    let resp = get(format!("/runs/{}", Uuid::from_u128(9))).await.unwrap();
    assert_eq!(resp.status(), 404);
    assert_eq!(resp.json::<Value>().await.unwrap()["error"], "UnknownRun");

    let resp = http.post(format!("{}/sessions", server.base)).body("{not json").send().await.unwrap();
    assert_eq!(resp.status(), 400);
    assert_eq!(resp.json::<Value>().await.unwrap()["error"], "BadRequest");

    let client = PushClient::new(&server.base, None);
    let session = client.create_session(&sim::default_setup(Role::SingleUser, "solo")).await.unwrap();
    let resp = http.post(format!("{}/sessions/{session}/start", server.base)).json(&json!({ "participant_id": "p1", "session_label": "t", "anticipated_duration_ms": 60_000 })).send().await.unwrap();
    assert_eq!(resp.status(), 409);
    assert_eq!(resp.json::<Value>().await.unwrap()["error"], "ChecklistIncomplete");

    let bad_filter = get(format!("/runs/{}/annotations?filter=%7B%22time_range%22%3A%5B5%2C1%5D%7D", Uuid::from_u128(9))).await.unwrap();
    assert_eq!(bad_filter.status(), 400);
}

async fn started_run(server: &Server) -> (Uuid, Uuid) {
    let http = reqwest::Client::new();
    let client = PushClient::new(&server.base, None);
    let session = client.create_session(&sim::default_setup(Role::SingleUser, "solo")).await.unwrap();
    let items = server.engine.lock().unwrap().session(session).unwrap().config.checklist.len();
    for index in 0..items {
        let resp = http.post(format!("{}/sessions/{session}/checklist", server.base)).json(&json!({ "index": index, "checked": true })).send().await.unwrap();
        assert!(resp.status().is_success());
    }
    let resp = http.post(format!("{}/sessions/{session}/start", server.base)).json(&json!({ "participant_id": "p1", "session_label": "t", "anticipated_duration_ms": 60_000 })).send().await.unwrap();
    assert_eq!(resp.status(), 201);
    let run: Value = resp.json().await.unwrap();
    (session, serde_json::from_value(run["id"].clone()).unwrap())
}

#[tokio::test(flavor = "multi_thread")]
async fn event_feed_delivers_new_annotations() {
    let server = spawn(3, None).await;
    let (_, run) = started_run(&server).await;
    let http = reqwest::Client::new();
    let mut feed = http.get(format!("{}/events", server.base)).send().await.unwrap();
    assert!(feed.headers()[reqwest::header::CONTENT_TYPE].to_str().unwrap().starts_with("text/event-stream"));

    let resp = http
        .post(format!("{}/runs/{run}/annotations", server.base))
        .json(&json!({ "kind": "correct", "note": "from the test" }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);

    let mut seen = String::new();
    let found = tokio::time::timeout(Duration::from_secs(5), async {
        while let Some(chunk) = feed.chunk().await.unwrap() {
            seen.push_str(&String::from_utf8_lossy(&chunk));
            if seen.contains("event: annotation_added") && seen.contains("from the test") {
                return true;
            }
        }
        false
    })
    .await;
    assert_eq!(found, Ok(true), "feed so far: {seen}");
}

fn frame(stream: &str, seq: u64, t: i64) -> Frame {
    Frame::new(stream, seq, Timestamp(t), (1, 1), FrameEncoding::RawRgb, vec![seq as u8, 1, 2])
}

#[tokio::test(flavor = "multi_thread")]
async fn ingest_counts_and_relay_forwards_in_order() {
    let server = spawn(4, None).await;
    let _ = started_run(&server).await;
    let stream = server.engine.lock().unwrap().media().stream_ids()[0].clone();
    let http = reqwest::Client::new();
    let mut relay = http.get(format!("{}/streams/{stream}.mjpeg", server.base)).send().await.unwrap();
    assert_eq!(relay.status(), 200);
    let boundary = mjpeg::boundary_from_content_type(relay.headers()[reqwest::header::CONTENT_TYPE].to_str().unwrap()).unwrap();

    // seq 3 repeats and seq 2 arrives late: both are dropped
    let mut body = Vec::new();
    for (seq, t) in [(1, 1_000), (3, 1_100), (3, 1_200), (2, 1_300), (4, 1_400)] {
        body.extend(mjpeg::encode_part(mjpeg::DEFAULT_BOUNDARY, &frame(&stream, seq, t)));
    }
    body.extend_from_slice(format!("--{}--\r\n", mjpeg::DEFAULT_BOUNDARY).as_bytes());
    let resp = http
        .post(format!("{}/ingest/{stream}", server.base))
        .header(reqwest::header::CONTENT_TYPE, mjpeg::content_type(mjpeg::DEFAULT_BOUNDARY))
        .body(body)
        .send()
        .await
        .unwrap();
    let summary: Value = resp.json().await.unwrap();
    assert_eq!(summary, json!({ "accepted": 3, "dropped": 2, "rejected": [] }));

    let mut parser = MultipartParser::new(&boundary);
    let mut seqs = Vec::new();
    let done = tokio::time::timeout(Duration::from_secs(5), async {
        while seqs.len() < 3 {
            let Some(chunk) = relay.chunk().await.unwrap() else { break };
            parser.push(&chunk);
            while let Some(part) = parser.next_part() {
                seqs.push(part.unwrap().to_incoming().unwrap().seq);
            }
        }
    })
    .await;
    assert!(done.is_ok(), "relay stalled after {seqs:?}");
    assert_eq!(seqs, vec![1, 3, 4]);

    let resp = http.post(format!("{}/ingest/nope", server.base)).header(reqwest::header::CONTENT_TYPE, mjpeg::content_type("b")).body("--b--\r\n").send().await.unwrap();
    assert_eq!(resp.status(), 404);
}
