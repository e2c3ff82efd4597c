//! Wizard/observer synchronization: framing, clock offset, relay, merge.

mod clock;
mod envelope;
mod merge;
mod peer;
pub mod transport;

use thiserror::Error;
use uuid::Uuid;

pub use clock::{estimate_offset, ClockOffset, PingSample};
pub use envelope::{decode_envelope, encode_envelope, FrameDecoder, MsgType, SyncEnvelope, MAX_FRAME_LEN};
pub use merge::{adopt_authority_log, apply_remote, merge_runs, normalize, union_logs};
pub use peer::{Hello, PeerEvent, SyncPeer, PING_SAMPLES, PROTOCOL_VERSION, RESYNC_INTERVAL_MS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown message type {0:?}")]
    UnknownMsgType(String),
    #[error("no usable ping samples")]
    NoSamples,
    #[error("unexpected {} message", .0.as_str())]
    UnexpectedMessage(MsgType),
    #[error("bad message body: {0}")]
    BadBody(String),
    #[error("run id mismatch: local {local}, remote {remote}")]
    RunIdMismatch { local: Uuid, remote: Uuid },
    #[error("run must be stopped before merging")]
    RunNotStopped,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("connection closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for SyncError {
    fn from(e: std::io::Error) -> Self {
        SyncError::Io(e.to_string())
    }
}
