//! HTTP API, event feed, and media endpoints over a shared [`Engine`].
//!
//! Mutating requests accept an optional `at` (ms since the epoch) that
//! stands in for the server clock, so a simulator pushing over HTTP gets the
//! same archives as one driving the engine in-process.

pub mod sync;

use std::convert::Infallible;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uuid::Uuid;

use crate::analyzer::{AnalyzerError, AnnotationFilter};
use crate::harness::{AnnotationRequest, Engine, HarnessError, SessionSetup};
use crate::media::mjpeg::{self, MultipartParser};
use crate::media::{Frame, ImageRef, IngestOutcome, MediaError};
use crate::session::{AnnotationPatch, EventSource, SessionError, ShortcutBinding, StartRequest, Utterance};
use crate::time::{Clock, Timestamp};

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Mutex<Engine>>,
    clock: Arc<dyn Clock>,
    token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(engine: Arc<Mutex<Engine>>, clock: Arc<dyn Clock>, token: Option<String>) -> Self {
        AppState { engine, clock, token: token.map(Into::into) }
    }

    pub fn engine(&self) -> MutexGuard<'_, Engine> {
        self.engine.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn now(&self, at: Option<Timestamp>) -> Timestamp {
        at.unwrap_or_else(|| self.clock.now())
    }
}

pub struct ApiError(HarnessError);

impl<E: Into<HarnessError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

fn classify(e: &HarnessError) -> (StatusCode, &'static str) {
    use StatusCode as S;
    match e {
        HarnessError::UnknownSession(_) => (S::NOT_FOUND, "UnknownSession"),
        HarnessError::UnknownRun(_) => (S::NOT_FOUND, "UnknownRun"),
        HarnessError::UnknownBinding(_) => (S::NOT_FOUND, "UnknownBinding"),
        HarnessError::BadRequest(_) => (S::BAD_REQUEST, "BadRequest"),
        HarnessError::NotConfigured(_) => (S::CONFLICT, "NotConfigured"),
        HarnessError::Session(e) => match e {
            SessionError::Binding(_) => (S::BAD_REQUEST, "InvalidBinding"),
            SessionError::ChecklistIncomplete(_) => (S::CONFLICT, "ChecklistIncomplete"),
            SessionError::StreamUnavailable(_) => (S::CONFLICT, "StreamUnavailable"),
            SessionError::WrongPhase(_) => (S::CONFLICT, "WrongPhase"),
            SessionError::PayloadMismatch { .. } => (S::BAD_REQUEST, "PayloadMismatch"),
            SessionError::RunNotActive => (S::CONFLICT, "RunNotActive"),
            SessionError::RunNotStopped => (S::CONFLICT, "RunNotStopped"),
            SessionError::InvalidStop => (S::CONFLICT, "InvalidStop"),
            SessionError::UnknownId(_) => (S::NOT_FOUND, "UnknownId"),
            SessionError::DuplicateId(_) => (S::CONFLICT, "DuplicateId"),
            SessionError::IllegalKindChange { .. } => (S::BAD_REQUEST, "IllegalKindChange"),
            SessionError::UnknownEventSource(_) => (S::BAD_REQUEST, "UnknownEventSource"),
            SessionError::SpanOutOfRange { .. } => (S::BAD_REQUEST, "SpanOutOfRange"),
            SessionError::OverlappingSpans { .. } => (S::BAD_REQUEST, "OverlappingSpans"),
            SessionError::OffsetOutOfRange { .. } => (S::BAD_REQUEST, "OffsetOutOfRange"),
            SessionError::InconsistentTimes { .. } => (S::BAD_REQUEST, "InconsistentTimes"),
            SessionError::InvalidConfig(_) => (S::BAD_REQUEST, "InvalidConfig"),
        },
        HarnessError::Media(e) => match e {
            MediaError::DuplicateStreamId(_) => (S::CONFLICT, "DuplicateStreamId"),
            MediaError::SourceUnreachable(_) => (S::BAD_REQUEST, "SourceUnreachable"),
            MediaError::UnknownStream(_) => (S::NOT_FOUND, "UnknownStream"),
            MediaError::NoFrameAvailable => (S::NOT_FOUND, "NoFrameAvailable"),
            MediaError::AlreadyRecording => (S::CONFLICT, "AlreadyRecording"),
            MediaError::NotRecording => (S::CONFLICT, "NotRecording"),
            MediaError::OffsetOutOfRange { .. } => (S::BAD_REQUEST, "OffsetOutOfRange"),
            MediaError::NotAnchored => (S::CONFLICT, "NotAnchored"),
            MediaError::InvalidRegion(_) => (S::BAD_REQUEST, "InvalidRegion"),
            MediaError::Corrupt(_) | MediaError::Io(_) => (S::INTERNAL_SERVER_ERROR, "Storage"),
        },
        HarnessError::Analyzer(e) => match e {
            AnalyzerError::ArchiveMissing(_) => (S::NOT_FOUND, "ArchiveMissing"),
            AnalyzerError::RunNotStopped(_) => (S::CONFLICT, "RunNotStopped"),
            AnalyzerError::Session(_) | AnalyzerError::Media(_) => (S::BAD_REQUEST, "Analyzer"),
            _ => (S::BAD_REQUEST, "BadRequest"),
        },
        HarnessError::Sync(_) => (S::BAD_REQUEST, "Sync"),
        HarnessError::Io(_) => (S::INTERNAL_SERVER_ERROR, "Storage"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = classify(&self.0);
        (status, Json(json!({ "error": code, "message": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, treating an empty body as `T::default()`.
fn body<T: DeserializeOwned + Default>(bytes: &Bytes) -> ApiResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| HarnessError::BadRequest(format!("invalid JSON body: {e}")).into())
}

fn required<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| HarnessError::BadRequest(format!("invalid JSON body: {e}")).into())
}

#[derive(Debug, Default, Deserialize)]
struct AtOnly {
    #[serde(default)]
    at: Option<Timestamp>,
}

#[derive(Debug, Deserialize)]
struct WithAt<T> {
    #[serde(flatten)]
    inner: T,
    #[serde(default)]
    at: Option<Timestamp>,
}

#[derive(Debug, Default, Deserialize)]
struct FilterQuery {
    filter: Option<String>,
    compare: Option<String>,
}

impl FilterQuery {
    fn filter(&self) -> ApiResult<AnnotationFilter> {
        let f: AnnotationFilter = match &self.filter {
            None => AnnotationFilter::default(),
            Some(s) => serde_json::from_str(s).map_err(|e| HarnessError::BadRequest(format!("invalid filter: {e}")))?,
        };
        f.validate().map_err(HarnessError::from)?;
        Ok(f)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/health", get(health))
        .route("/events", get(events))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/checklist", post(check_item))
        .route("/sessions/{id}/emitters", post(add_emitter))
        .route("/sessions/{id}/triggers", post(add_trigger))
        .route("/sessions/{id}/events", post(fire_event))
        .route("/sessions/{id}/start", post(start))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/stop", post(stop))
        .route("/runs/{id}/annotations", post(annotate).get(list_annotations))
        .route("/runs/{id}/annotations/{aid}", patch(edit_annotation))
        .route("/runs/{id}/stats", get(stats))
        .route("/runs/{id}/transcripts", post(transcripts))
        .route("/runs/{id}/notes", post(retro_note))
        .route("/runs/{id}/summary", get(summary))
        .route("/runs/{id}/timeline", get(timeline))
        .route("/runs/{id}/export.csv", get(export_csv))
        .route("/runs/{id}/report.html", get(report_html))
        .route("/runs/{id}/index/{stream}", get(frame_index))
        .route("/runs/{id}/frames/{stream}", get(frame_at))
        .route("/runs/{id}/images/{stream}/{seq}", get(image))
        .route("/streams", get(list_streams))
        .route("/streams/{file}", get(relay))
        .route("/ingest/{stream}", post(ingest))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(st): State<AppState>, req: Request, next: Next) -> Response {
    let Some(token) = st.token.as_deref() else { return next.run(req).await };
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    // browsers cannot set headers on <img> or EventSource requests
    let query = req.uri().query().and_then(|q| url::form_urlencoded::parse(q.as_bytes()).find(|(k, _)| k == "token").map(|(_, v)| v.into_owned()));
    if bearer == Some(token) || query.as_deref() == Some(token) {
        next.run(req).await
    } else {
        (StatusCode::UNAUTHORIZED, Json(json!({ "error": "Unauthorized", "message": "missing or wrong token" }))).into_response()
    }
}

async fn index() -> Html<&'static str> {
    Html("<!DOCTYPE html><html><head><meta charset=\"utf-8\"><title>harness</title></head><body><h1>harness</h1><p>API is up. See /health, /events, /sessions, /runs.</p></body></html>")
}

async fn health(State(st): State<AppState>) -> Json<Value> {
    let e = st.engine();
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "active_run": e.active_run().map(|r| r.id),
        "streams": e.media().stream_ids(),
    }))
}

fn event_stream(rx: tokio::sync::mpsc::UnboundedReceiver<crate::harness::HarnessEvent>) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(rx, |mut rx| async move {
        let ev = rx.recv().await?;
        let data = serde_json::to_string(&ev).expect("event serializes");
        Some((Ok(Event::default().event(ev.kind.clone()).id(ev.seq.to_string()).data(data)), rx))
    })
}

async fn events(State(st): State<AppState>) -> impl IntoResponse {
    let rx = st.engine().subscribe();
    Sse::new(event_stream(rx)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

async fn create_session(State(st): State<AppState>, raw: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: WithAt<SessionSetup> = required(&raw)?;
    let now = st.now(req.at);
    let id = st.engine().create_session(req.inner, now)?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn list_sessions(State(st): State<AppState>) -> Json<Value> {
    let e = st.engine();
    Json(json!(e.sessions().collect::<Vec<_>>()))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Json<Value>> {
    let e = st.engine();
    let s = e.session(id)?;
    Ok(Json(json!({
        "session": s,
        "triggers": s.triggers(),
        "unchecked": s.unchecked_items(),
    })))
}

#[derive(Deserialize)]
struct CheckReq {
    index: usize,
    #[serde(default = "yes")]
    checked: bool,
}

fn yes() -> bool {
    true
}

async fn check_item(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<Json<Value>> {
    let req: CheckReq = required(&raw)?;
    let mut e = st.engine();
    e.set_checked(id, req.index, req.checked)?;
    Ok(Json(json!({ "unchecked": e.session(id)?.unchecked_items() })))
}

#[derive(Deserialize)]
struct SourceReq {
    source: EventSource,
    #[serde(default)]
    at: Option<Timestamp>,
}

async fn add_emitter(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<StatusCode> {
    let req: SourceReq = required(&raw)?;
    st.engine().register_emitter(id, req.source)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct TriggerReq {
    source: EventSource,
    binding: ShortcutBinding,
}

async fn add_trigger(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: TriggerReq = required(&raw)?;
    let tid = st.engine().register_auto_trigger(id, req.source, req.binding)?;
    Ok((StatusCode::CREATED, Json(json!({ "trigger_id": tid }))))
}

async fn fire_event(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<Json<Value>> {
    let req: SourceReq = required(&raw)?;
    let now = st.now(req.at);
    let added = st.engine().dispatch_event(id, &req.source, now)?;
    Ok(Json(json!(added)))
}

async fn start(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: WithAt<StartRequest> = required(&raw)?;
    let now = st.now(req.at);
    let run = st.engine().start_pilot(id, &req.inner, now, None)?;
    Ok((StatusCode::CREATED, Json(json!(run))))
}

async fn list_runs(State(st): State<AppState>) -> Json<Value> {
    let e = st.engine();
    let runs: Vec<Value> = e
        .runs()
        .map(|r| {
            json!({
                "id": r.id,
                "session_id": r.session_id,
                "participant_id": r.participant_id,
                "session_label": r.session_label,
                "start_time": r.start_time,
                "stop_time": r.stop_time,
                "annotations": r.annotations().len(),
            })
        })
        .collect();
    Json(json!(runs))
}

async fn get_run(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(st.engine().run(id)?)))
}

async fn stop(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<Json<Value>> {
    let req: AtOnly = body(&raw)?;
    let now = st.now(req.at);
    Ok(Json(json!(st.engine().stop_run(id, now)?)))
}

async fn annotate(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: WithAt<AnnotationRequest> = required(&raw)?;
    let now = st.now(req.at);
    let a = st.engine().record(id, req.inner, now)?;
    Ok((StatusCode::CREATED, Json(json!(a))))
}

async fn edit_annotation(State(st): State<AppState>, Path((id, aid)): Path<(Uuid, Uuid)>, raw: Bytes) -> ApiResult<Json<Value>> {
    let req: WithAt<AnnotationPatch> = required(&raw)?;
    let now = st.now(req.at);
    Ok(Json(json!(st.engine().edit(id, aid, &req.inner, now)?)))
}

async fn list_annotations(State(st): State<AppState>, Path(id): Path<Uuid>, Query(q): Query<FilterQuery>) -> ApiResult<Json<Value>> {
    let f = q.filter()?;
    let e = st.engine();
    Ok(Json(json!(crate::analyzer::filter_annotations(e.run(id)?, &f))))
}

async fn stats(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Json<Value>> {
    let e = st.engine();
    let run = e.run(id)?;
    Ok(Json(json!({ "stats": run.stats(), "elapsed": run.stop_time.is_none().then(|| st.clock.now().millis_since(run.start_time)) })))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TranscriptReq {
    Wrapped {
        utterances: Vec<Utterance>,
        #[serde(default)]
        at: Option<Timestamp>,
    },
    Bare(Vec<Utterance>),
}

async fn transcripts(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let (utterances, at) = match required::<TranscriptReq>(&raw)? {
        TranscriptReq::Wrapped { utterances, at } => (utterances, at),
        TranscriptReq::Bare(u) => (u, None),
    };
    let now = st.now(at);
    let added = st.engine().attach_transcripts(id, &utterances, now)?;
    Ok((StatusCode::CREATED, Json(json!(added))))
}

#[derive(Deserialize)]
struct NoteReq {
    media_offset: i64,
    text: String,
    #[serde(default)]
    at: Option<Timestamp>,
}

async fn retro_note(State(st): State<AppState>, Path(id): Path<Uuid>, raw: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: NoteReq = required(&raw)?;
    let now = st.now(req.at);
    let a = st.engine().add_retro_note(id, req.media_offset, &req.text, now)?;
    Ok((StatusCode::CREATED, Json(json!(a))))
}

async fn summary(State(st): State<AppState>, Path(id): Path<Uuid>, Query(q): Query<FilterQuery>) -> ApiResult<Json<Value>> {
    let f = q.filter()?;
    Ok(Json(json!(st.engine().summary(id, &f)?)))
}

async fn timeline(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(st.engine().timeline(id)?)))
}

async fn export_csv(State(st): State<AppState>, Path(id): Path<Uuid>, Query(q): Query<FilterQuery>) -> ApiResult<Response> {
    let f = q.filter()?;
    let doc = st.engine().export_csv(id, &f)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], doc).into_response())
}

async fn report_html(State(st): State<AppState>, Path(id): Path<Uuid>, Query(q): Query<FilterQuery>) -> ApiResult<Response> {
    let f = q.filter()?;
    let mut ids = vec![id];
    for part in q.compare.as_deref().unwrap_or("").split(',').filter(|s| !s.is_empty()) {
        ids.push(part.parse().map_err(|_| HarnessError::BadRequest(format!("bad run id `{part}`")))?);
    }
    let doc = st.engine().export_report(&ids, &f)?;
    Ok(Html(doc).into_response())
}

async fn frame_index(State(st): State<AppState>, Path((id, stream)): Path<(Uuid, String)>) -> ApiResult<Json<Value>> {
    let e = st.engine();
    let run = e.run(id)?;
    let archive = e.archive_for(run).ok_or(AnalyzerError::ArchiveMissing(id))?;
    let index = archive.index(&stream).ok_or_else(|| MediaError::UnknownStream(stream.clone()))?;
    Ok(Json(json!({ "start_wall": archive.start_wall(), "duration_ms": archive.duration_ms(), "frames": index })))
}

fn frame_response(frame: &Frame, bytes: Bytes, media_offset: Option<i64>) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(frame.header.encoding.content_type()));
    headers.insert("x-seq", frame.seq().into());
    headers.insert("x-capture-time", frame.capture_time().as_millis().into());
    if let Some(o) = media_offset {
        headers.insert("x-media-offset", o.into());
    }
    (headers, bytes).into_response()
}

#[derive(Deserialize)]
struct OffsetQuery {
    offset: i64,
}

async fn frame_at(State(st): State<AppState>, Path((id, stream)): Path<(Uuid, String)>, Query(q): Query<OffsetQuery>) -> ApiResult<Response> {
    let e = st.engine();
    let f = e.frame_at(id, &stream, q.offset)?;
    let offset = e.run(id).ok().and_then(|r| e.archive_for(r)).and_then(|a| a.wall_to_media(f.capture_time()).ok());
    Ok(frame_response(&f, f.bytes.clone(), offset))
}

async fn image(State(st): State<AppState>, Path((id, stream, seq)): Path<(Uuid, String, u64)>) -> ApiResult<Response> {
    let e = st.engine();
    let run = e.run(id)?;
    let image = ImageRef { stream_id: stream, seq, region: None };
    let (frame, bytes) = e.media().render(&image, e.archive_for(run))?;
    Ok(frame_response(&frame, bytes, None))
}

async fn list_streams(State(st): State<AppState>) -> Json<Value> {
    let media = st.engine().media();
    let streams: Vec<Value> = media
        .stream_ids()
        .into_iter()
        .filter_map(|id| media.stream(&id))
        .map(|h| json!({ "stream_id": h.id(), "descriptor": h.descriptor(), "counters": h.counters(), "buffered": h.frame_count() }))
        .collect();
    Json(json!(streams))
}

/// `GET /streams/{id}.mjpeg`: live relay with the ingest part headers.
async fn relay(State(st): State<AppState>, Path(file): Path<String>) -> ApiResult<Response> {
    let id = file.strip_suffix(".mjpeg").ok_or_else(|| MediaError::UnknownStream(file.clone()))?;
    let handle = st.engine().media().stream(id).ok_or_else(|| MediaError::UnknownStream(id.to_string()))?;
    let sub = handle.subscribe();
    let parts = futures::stream::unfold(sub, |mut sub| async move {
        let f = sub.recv().await?;
        Some((Ok::<_, Infallible>(Bytes::from(mjpeg::encode_part(mjpeg::DEFAULT_BOUNDARY, &f))), sub))
    });
    Ok((
        [(header::CONTENT_TYPE, mjpeg::content_type(mjpeg::DEFAULT_BOUNDARY)), (header::CACHE_CONTROL, "no-store".to_string())],
        Body::from_stream(parts),
    )
        .into_response())
}

#[derive(Debug, Default, Serialize)]
struct IngestSummary {
    accepted: u64,
    dropped: u64,
    rejected: Vec<String>,
}

/// `POST /ingest/{stream}`: a `multipart/x-mixed-replace` push, consumed
/// part by part as the body streams in.
async fn ingest(State(st): State<AppState>, Path(stream): Path<String>, Query(at): Query<AtOnly>, headers: HeaderMap, req: Body) -> ApiResult<Json<IngestSummary>> {
    let ct = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("");
    let boundary = mjpeg::boundary_from_content_type(ct)
        .ok_or_else(|| HarnessError::BadRequest("expected multipart/x-mixed-replace with a boundary".into()))?;
    let handle = st.engine().media().stream(&stream).ok_or_else(|| MediaError::UnknownStream(stream.clone()))?;
    let mut parser = MultipartParser::new(&boundary);
    let mut summary = IngestSummary::default();
    let mut body = req.into_data_stream();
    loop {
        while let Some(part) = parser.next_part() {
            match part.and_then(|p| p.to_incoming()) {
                Ok(frame) => match handle.ingest(frame, st.now(at.at))? {
                    IngestOutcome::Accepted => summary.accepted += 1,
                    IngestOutcome::Dropped(_) => summary.dropped += 1,
                },
                Err(e) => summary.rejected.push(e.to_string()),
            }
        }
        if parser.is_done() {
            break;
        }
        match body.next().await {
            Some(Ok(chunk)) => parser.push(&chunk),
            Some(Err(e)) => return Err(HarnessError::BadRequest(format!("body: {e}")).into()),
            None => break,
        }
    }
    Ok(Json(summary))
}

/// Raises the anticipated-duration notification on the system clock.
pub fn spawn_ticker(state: AppState, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut iv = tokio::time::interval(every);
        loop {
            iv.tick().await;
            let now = state.clock.now();
            state.engine().tick(now);
        }
    })
}
