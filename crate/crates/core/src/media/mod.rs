//! Frame ingestion, live relay, recording, and wall-clock/media-time lookup.

mod archive;
mod frame;
pub mod image;
pub mod mjpeg;

pub use archive::{container_path, encode_record, index_path, read_record, Archive, ArchiveMeta, IndexEntry, Recording};
pub use frame::{BadImageRef, Frame, FrameEncoding, FrameHeader, ImageRef, IncomingFrame, Region};

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use uuid::Uuid;

use crate::session::StreamStatus;
use crate::time::Timestamp;

pub const DEFAULT_BUFFER_MS: i64 = 30_000;
const RELAY_CAPACITY: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum MediaError {
    #[error("stream `{0}` is already open")]
    DuplicateStreamId(String),
    #[error("source `{0}` is unreachable")]
    SourceUnreachable(String),
    #[error("unknown stream `{0}`")]
    UnknownStream(String),
    #[error("no frame available at the requested time")]
    NoFrameAvailable,
    #[error("a recording is already in progress")]
    AlreadyRecording,
    #[error("no recording in progress")]
    NotRecording,
    #[error("offset {offset} outside [0, {duration}]")]
    OffsetOutOfRange { offset: i64, duration: i64 },
    #[error("archive has no recorded frames")]
    NotAnchored,
    #[error("region {0:?} does not fit the frame")]
    InvalidRegion(Region),
    #[error("archive data is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub stream_id: String,
    pub source_url: String,
    pub expected_fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials: Option<String>,
}

impl StreamDescriptor {
    pub fn new(stream_id: &str, source_url: &str, expected_fps: f64) -> Self {
        StreamDescriptor { stream_id: stream_id.into(), source_url: source_url.into(), expected_fps, credentials: None }
    }
}

const SOURCE_SCHEMES: [&str; 5] = ["sim", "push", "http", "https", "tcp"];

fn source_reachable(src: &str) -> bool {
    url::Url::parse(src).is_ok_and(|u| SOURCE_SCHEMES.contains(&u.scheme()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    OutOfOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum IngestOutcome {
    Accepted,
    Dropped(DropReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCounters {
    pub accepted: u64,
    pub dropped: u64,
    pub recorded: u64,
}

struct StreamState {
    last_seq: Option<u64>,
    last_capture: Option<Timestamp>,
    ring: VecDeque<Frame>,
    counters: StreamCounters,
    recording: Option<Arc<Recording>>,
}

struct StreamInner {
    desc: StreamDescriptor,
    buffer_ms: i64,
    state: Mutex<StreamState>,
    relay: broadcast::Sender<Frame>,
}

/// Handle to one open stream. Cloning is cheap; all clones share the
/// stream's pipeline.
#[derive(Clone)]
pub struct StreamHandle(Arc<StreamInner>);

impl std::fmt::Debug for StreamHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("StreamHandle").field(&self.0.desc.stream_id).finish()
    }
}

impl StreamHandle {
    pub fn id(&self) -> &str {
        &self.0.desc.stream_id
    }

    pub fn descriptor(&self) -> &StreamDescriptor {
        &self.0.desc
    }

    pub fn counters(&self) -> StreamCounters {
        self.0.state.lock().expect("stream lock").counters
    }

    pub fn frame_count(&self) -> usize {
        self.0.state.lock().expect("stream lock").ring.len()
    }

    /// Accepts a frame, or drops it when seq or capture time go backwards.
    /// A missing capture time is replaced with `now` and flagged.
    pub fn ingest(&self, incoming: IncomingFrame, now: Timestamp) -> Result<IngestOutcome, MediaError> {
        let mut st = self.0.state.lock().expect("stream lock");
        let (capture_time, substituted) = match incoming.capture_time {
            Some(t) => (t, false),
            None => (now, true),
        };
        let out_of_order = st.last_seq.is_some_and(|s| incoming.seq <= s) || st.last_capture.is_some_and(|c| capture_time < c);
        if out_of_order {
            st.counters.dropped += 1;
            return Ok(IngestOutcome::Dropped(DropReason::OutOfOrder));
        }
        let mut frame = Frame::new(
            self.0.desc.stream_id.clone(),
            incoming.seq,
            capture_time,
            (incoming.width, incoming.height),
            incoming.encoding,
            incoming.bytes,
        );
        frame.header.time_substituted = substituted;

        // the recording path must not drop; errors surface to the caller
        if let Some(rec) = st.recording.clone() {
            if rec.append(&frame)? {
                st.counters.recorded += 1;
            }
        }
        st.last_seq = Some(frame.seq());
        st.last_capture = Some(capture_time);
        st.counters.accepted += 1;
        st.ring.push_back(frame.clone());
        let horizon = capture_time - self.0.buffer_ms;
        while st.ring.front().is_some_and(|f| f.capture_time() < horizon) {
            st.ring.pop_front();
        }
        drop(st);
        // no subscribers is fine
        let _ = self.0.relay.send(frame);
        Ok(IngestOutcome::Accepted)
    }

    pub fn subscribe(&self) -> RelaySubscriber {
        RelaySubscriber { rx: self.0.relay.subscribe(), last_seq: None, skipped: 0 }
    }

    /// Latest frame with `capture_time <= at`, from the live buffer or the
    /// active recording.
    fn frame_at_or_before(&self, at: Timestamp) -> Result<Frame, MediaError> {
        let st = self.0.state.lock().expect("stream lock");
        let from_ring = {
            let n = st.ring.partition_point(|f| f.capture_time() <= at);
            n.checked_sub(1).map(|i| st.ring[i].clone())
        };
        if let Some(f) = from_ring {
            return Ok(f);
        }
        // older than the live buffer: fall back to the recording
        if let Some(rec) = &st.recording {
            if let Some(idx) = rec.index_snapshot(self.id()) {
                let n = idx.partition_point(|e| e.capture_time <= at);
                if let Some(e) = n.checked_sub(1).map(|i| idx[i]) {
                    return rec.read(self.id(), &e);
                }
            }
        }
        Err(MediaError::NoFrameAvailable)
    }

    /// Reference to the latest frame at or before `at`, optionally cropped.
    pub fn snapshot(&self, at: Timestamp, region: Option<Region>) -> Result<ImageRef, MediaError> {
        let f = self.frame_at_or_before(at)?;
        if let Some(r) = &region {
            if !r.fits(f.header.width, f.header.height) {
                return Err(MediaError::InvalidRegion(*r));
            }
        }
        Ok(ImageRef { stream_id: self.id().to_string(), seq: f.seq(), region })
    }

    /// Looks a frame up by seq in the live buffer or active recording.
    pub fn frame_by_seq(&self, seq: u64) -> Option<Frame> {
        let st = self.0.state.lock().expect("stream lock");
        if let Ok(i) = st.ring.binary_search_by_key(&seq, |f| f.seq()) {
            return Some(st.ring[i].clone());
        }
        let rec = st.recording.as_ref()?;
        let idx = rec.index_snapshot(self.id())?;
        let e = idx.binary_search_by_key(&seq, |e| e.seq).ok().map(|i| idx[i])?;
        rec.read(self.id(), &e).ok()
    }
}

/// Live relay receiver. Under backpressure frames are skipped, never
/// reordered or repeated.
pub struct RelaySubscriber {
    rx: broadcast::Receiver<Frame>,
    last_seq: Option<u64>,
    skipped: u64,
}

impl RelaySubscriber {
    pub async fn recv(&mut self) -> Option<Frame> {
        loop {
            match self.rx.recv().await {
                Ok(f) => {
                    if self.last_seq.is_some_and(|s| f.seq() <= s) {
                        continue;
                    }
                    self.last_seq = Some(f.seq());
                    return Some(f);
                }
                Err(broadcast::error::RecvError::Lagged(n)) => self.skipped += n,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }

    pub fn try_recv(&mut self) -> Option<Frame> {
        loop {
            match self.rx.try_recv() {
                Ok(f) => {
                    if self.last_seq.is_some_and(|s| f.seq() <= s) {
                        continue;
                    }
                    self.last_seq = Some(f.seq());
                    return Some(f);
                }
                Err(broadcast::error::TryRecvError::Lagged(n)) => self.skipped += n,
                Err(_) => return None,
            }
        }
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }
}

/// All streams of one instance plus the active recording.
pub struct MediaPipeline {
    streams: RwLock<BTreeMap<String, StreamHandle>>,
    recording: Mutex<Option<(Arc<Recording>, Vec<String>)>>,
    archive_root: PathBuf,
    buffer_ms: i64,
}

impl MediaPipeline {
    pub fn new(archive_root: impl Into<PathBuf>) -> Self {
        Self::with_buffer(archive_root, DEFAULT_BUFFER_MS)
    }

    pub fn with_buffer(archive_root: impl Into<PathBuf>, buffer_ms: i64) -> Self {
        MediaPipeline {
            streams: RwLock::new(BTreeMap::new()),
            recording: Mutex::new(None),
            archive_root: archive_root.into(),
            buffer_ms,
        }
    }

    pub fn archive_root(&self) -> &std::path::Path {
        &self.archive_root
    }

    pub fn open_stream(&self, desc: StreamDescriptor) -> Result<StreamHandle, MediaError> {
        if !source_reachable(&desc.source_url) {
            return Err(MediaError::SourceUnreachable(desc.source_url));
        }
        let mut streams = self.streams.write().expect("streams lock");
        if streams.contains_key(&desc.stream_id) {
            return Err(MediaError::DuplicateStreamId(desc.stream_id));
        }
        let (relay, _) = broadcast::channel(RELAY_CAPACITY);
        let handle = StreamHandle(Arc::new(StreamInner {
            buffer_ms: self.buffer_ms,
            state: Mutex::new(StreamState {
                last_seq: None,
                last_capture: None,
                ring: VecDeque::new(),
                counters: StreamCounters::default(),
                recording: None,
            }),
            relay,
            desc,
        }));
        streams.insert(handle.id().to_string(), handle.clone());
        Ok(handle)
    }

    pub fn stream(&self, id: &str) -> Option<StreamHandle> {
        self.streams.read().expect("streams lock").get(id).cloned()
    }

    pub fn stream_ids(&self) -> Vec<String> {
        self.streams.read().expect("streams lock").keys().cloned().collect()
    }

    pub fn ingest(&self, stream_id: &str, frame: IncomingFrame, now: Timestamp) -> Result<IngestOutcome, MediaError> {
        self.stream(stream_id)
            .ok_or_else(|| MediaError::UnknownStream(stream_id.to_string()))?
            .ingest(frame, now)
    }

    pub fn is_recording(&self) -> bool {
        self.recording.lock().expect("recording lock").is_some()
    }

    pub fn start_recording(&self, archive_id: Uuid, run_id: Uuid, stream_ids: &[String], request_time: Timestamp) -> Result<Arc<Recording>, MediaError> {
        let mut slot = self.recording.lock().expect("recording lock");
        if slot.is_some() {
            return Err(MediaError::AlreadyRecording);
        }
        let handles = stream_ids
            .iter()
            .map(|s| self.stream(s).ok_or_else(|| MediaError::UnknownStream(s.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let rec = Arc::new(Recording::create(self.archive_root.join(archive_id.to_string()), archive_id, run_id, stream_ids, request_time)?);
        for h in &handles {
            h.0.state.lock().expect("stream lock").recording = Some(rec.clone());
        }
        *slot = Some((rec.clone(), stream_ids.to_vec()));
        Ok(rec)
    }

    /// Current recording's media anchor, once its first frame has arrived.
    pub fn recording_start(&self) -> Option<Timestamp> {
        self.recording.lock().expect("recording lock").as_ref().and_then(|(r, _)| r.start_wall())
    }

    pub fn active_recording(&self) -> Option<Arc<Recording>> {
        self.recording.lock().expect("recording lock").as_ref().map(|(r, _)| r.clone())
    }

    /// Detaches the recording from its streams and seals it.
    pub fn stop_recording(&self) -> Result<Archive, MediaError> {
        let (rec, ids) = self.recording.lock().expect("recording lock").take().ok_or(MediaError::NotRecording)?;
        for id in &ids {
            if let Some(h) = self.stream(id) {
                h.0.state.lock().expect("stream lock").recording = None;
            }
        }
        let rec = Arc::try_unwrap(rec).map_err(|_| MediaError::Corrupt("recording still referenced".into()))?;
        rec.seal()
    }

    /// Resolves an image reference to encoded bytes, preferring a sealed
    /// archive when given.
    pub fn render(&self, image: &ImageRef, archive: Option<&Archive>) -> Result<(Frame, Bytes), MediaError> {
        let frame = match archive.and_then(|a| a.frame_by_seq(&image.stream_id, image.seq).ok()) {
            Some(f) => f,
            None => self
                .stream(&image.stream_id)
                .and_then(|h| h.frame_by_seq(image.seq))
                .ok_or(MediaError::NoFrameAvailable)?,
        };
        let bytes = self::image::crop(&frame, image.region.as_ref())?;
        Ok((frame, bytes))
    }
}

impl StreamStatus for MediaPipeline {
    fn is_ingesting(&self, stream_id: &str) -> bool {
        self.stream(stream_id).is_some()
    }
}
