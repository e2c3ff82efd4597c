//! Out-of-process mode: drives a running server over its HTTP API.
//!
//! Frames are pushed to `/ingest/{stream}` as multipart bodies, batched
//! between script events, and every request carries the script time as `at`
//! so the server ends up with the same archive as an in-process run.

use reqwest::{Client, Method, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use uuid::Uuid;

use super::{
    build_report, check_session, schedule, start_request, utterances, SimAction, SimError, SimReport, SimScript, Step, SIM_EPOCH,
    SLIDE_EVENT,
};
use crate::harness::SessionSetup;
use crate::media::mjpeg;
use crate::media::{Frame, IndexEntry};
use crate::session::{EventSource, PilotRun, Session};

pub struct PushClient {
    http: Client,
    base: String,
    token: Option<String>,
}

impl PushClient {
    pub fn new(base: &str, token: Option<String>) -> Self {
        PushClient { http: Client::new(), base: base.trim_end_matches('/').to_string(), token }
    }

    fn req(&self, method: Method, path: &str) -> RequestBuilder {
        let b = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => b.bearer_auth(t),
            None => b,
        }
    }

    async fn check(resp: Result<Response, reqwest::Error>) -> Result<Response, SimError> {
        let resp = resp.map_err(|e| SimError::Remote { status: 0, code: "Unreachable".into(), message: e.to_string() })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let body: Value = resp.json().await.unwrap_or(Value::Null);
        Err(SimError::Remote {
            status,
            code: body["error"].as_str().unwrap_or("Unknown").to_string(),
            message: body["message"].as_str().unwrap_or_default().to_string(),
        })
    }

    async fn call<T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<Value>) -> Result<T, SimError> {
        let mut b = self.req(method, path);
        if let Some(v) = body {
            b = b.json(&v);
        }
        let resp = Self::check(b.send().await).await?;
        resp.json().await.map_err(|e| SimError::Remote { status: 0, code: "BadResponse".into(), message: e.to_string() })
    }

    pub async fn create_session(&self, setup: &SessionSetup) -> Result<Uuid, SimError> {
        let mut body = serde_json::to_value(setup)?;
        body["at"] = json!(SIM_EPOCH);
        let v: Value = self.call(Method::POST, "/sessions", Some(body)).await?;
        serde_json::from_value(v["session_id"].clone()).map_err(SimError::from)
    }

    async fn push_frames(&self, stream: &str, frames: &[Frame], at: i64) -> Result<(), SimError> {
        let mut body = Vec::new();
        for f in frames {
            body.extend(mjpeg::encode_part(mjpeg::DEFAULT_BOUNDARY, f));
        }
        body.extend_from_slice(format!("--{}--\r\n", mjpeg::DEFAULT_BOUNDARY).as_bytes());
        let b = self
            .req(Method::POST, &format!("/ingest/{stream}?at={at}"))
            .header(reqwest::header::CONTENT_TYPE, mjpeg::content_type(mjpeg::DEFAULT_BOUNDARY))
            .body(body);
        let v: Value = Self::check(b.send().await).await?.json().await.unwrap_or(Value::Null);
        if !v["rejected"].as_array().is_none_or(Vec::is_empty) {
            return Err(SimError::Remote { status: 200, code: "Rejected".into(), message: v["rejected"].to_string() });
        }
        Ok(())
    }

    /// The HTTP twin of [`super::scripted_run`].
    pub async fn scripted_run(&self, script: &SimScript, session_id: Uuid) -> Result<SimReport, SimError> {
        script.validate()?;
        let v: Value = self.call(Method::GET, &format!("/sessions/{session_id}"), None).await?;
        let session: Session = serde_json::from_value(v["session"].clone())?;
        let keys = check_session(&session)?;
        for index in 0..session.config.checklist.len() {
            let _: Value = self.call(Method::POST, &format!("/sessions/{session_id}/checklist"), Some(json!({ "index": index, "checked": true }))).await?;
        }
        let streams = session.config.recorded_streams();
        let mut body = serde_json::to_value(start_request(script))?;
        body["at"] = json!(SIM_EPOCH);
        let run: PilotRun = self.call(Method::POST, &format!("/sessions/{session_id}/start"), Some(body)).await?;
        let run_id = run.id;

        let mut pending: Vec<Vec<Frame>> = vec![Vec::new(); streams.len()];
        let mut last_frame_at = SIM_EPOCH.as_millis();
        for (t, step) in schedule(script, &streams) {
            let now = SIM_EPOCH + t;
            match step {
                Step::Frame(f) => {
                    let k = streams.iter().position(|s| s == f.stream_id()).expect("scheduled from these streams");
                    last_frame_at = now.as_millis();
                    pending[k].push(f);
                }
                Step::Event(e) => {
                    self.flush(&streams, &mut pending, last_frame_at).await?;
                    match &e.action {
                        SimAction::SlideChange { .. } => {
                            let body = json!({ "source": EventSource::WizardEvent(SLIDE_EVENT.into()), "at": now });
                            let _: Value = self.call(Method::POST, &format!("/sessions/{session_id}/events"), Some(body)).await?;
                        }
                        SimAction::ParticipantTap { correct } => {
                            let key = if *correct { &keys.correct } else { &keys.incorrect };
                            let body = json!({ "key": key, "event_time": now, "at": now });
                            let _: Value = self.call(Method::POST, &format!("/runs/{run_id}/annotations"), Some(body)).await?;
                        }
                        SimAction::Utterance { .. } => {}
                    }
                }
            }
        }
        self.flush(&streams, &mut pending, last_frame_at).await?;

        let end = SIM_EPOCH + script.duration_ms.max(1);
        let run: PilotRun = self.call(Method::POST, &format!("/runs/{run_id}/stop"), Some(json!({ "at": end }))).await?;
        let said = utterances(script, run.duration_ms().unwrap_or(0));
        if !said.is_empty() {
            let _: Value = self.call(Method::POST, &format!("/runs/{run_id}/transcripts"), Some(json!({ "utterances": said, "at": end }))).await?;
        }

        let run: PilotRun = self.call(Method::GET, &format!("/runs/{run_id}"), None).await?;
        let mut frames_recorded = 0;
        let mut duration = 0;
        for s in &streams {
            let v: Value = self.call(Method::GET, &format!("/runs/{run_id}/index/{s}"), None).await?;
            let index: Vec<IndexEntry> = serde_json::from_value(v["frames"].clone())?;
            frames_recorded += index.len() as u64;
            duration = v["duration_ms"].as_i64().unwrap_or(0);
        }
        Ok(build_report(script, &run, streams.len() as u64, frames_recorded, duration))
    }

    async fn flush(&self, streams: &[String], pending: &mut [Vec<Frame>], at: i64) -> Result<(), SimError> {
        for (s, frames) in streams.iter().zip(pending.iter_mut()) {
            if !frames.is_empty() {
                self.push_frames(s, frames, at).await?;
                frames.clear();
            }
        }
        Ok(())
    }

    pub async fn export_csv(&self, run_id: Uuid) -> Result<String, SimError> {
        let resp = Self::check(self.req(Method::GET, &format!("/runs/{run_id}/export.csv")).send().await).await?;
        resp.text().await.map_err(|e| SimError::Remote { status: 0, code: "BadResponse".into(), message: e.to_string() })
    }
}
