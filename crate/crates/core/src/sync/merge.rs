//! Live application of relayed annotations and the post-pilot log merge.

use std::collections::BTreeMap;

use uuid::Uuid;

use super::{ClockOffset, MsgType, SyncEnvelope, SyncError};
use crate::session::{Annotation, AnnotationKind, AnnotationPayload, Origin, PilotRun};
use crate::time::Timestamp;

/// Shifts a remote annotation onto the local clock and re-derives its media
/// offset from the local recording anchor (kept as-is when there is none).
pub fn normalize(a: &Annotation, offset: &ClockOffset, anchor: Option<Timestamp>) -> Annotation {
    let mut out = a.clone();
    out.wall_time = a.wall_time - offset.correction_ms();
    if let Some(start) = anchor {
        out.media_offset = Some(out.wall_time.millis_since(start).max(0));
    }
    out
}

/// Applies one relayed annotation. A second delivery of the same id is a
/// no-op that returns the stored copy.
pub fn apply_remote(run: &mut PilotRun, env: &SyncEnvelope, offset: &ClockOffset) -> Result<Annotation, SyncError> {
    if env.msg_type != MsgType::AnnotationMsg {
        return Err(SyncError::UnexpectedMessage(env.msg_type));
    }
    let remote: Annotation = serde_json::from_value(env.body.clone()).map_err(|e| SyncError::BadBody(e.to_string()))?;
    if remote.run_id != run.id {
        return Err(SyncError::RunIdMismatch { local: run.id, remote: remote.run_id });
    }
    if let Some(existing) = run.get(remote.id) {
        return Ok(existing.clone());
    }
    let mut a = normalize(&remote, offset, run.recording_start);
    a.origin = Origin::Remote;
    Ok(run.insert(a))
}

// Counter values are renumbered after every merge, so they take no part in
// choosing between two copies of one annotation.
fn join_key(a: &Annotation) -> String {
    let mut k = a.clone();
    if k.kind == AnnotationKind::Counter {
        k.payload = AnnotationPayload::Counter { value: 0 };
    }
    serde_json::to_string(&k).expect("annotation serializes")
}

/// Union by id. When both sides hold a copy, the copy with the greater
/// canonical serialization wins, which makes the union commutative,
/// associative, and idempotent.
pub fn union_logs<'a>(logs: impl IntoIterator<Item = &'a Annotation>) -> Vec<Annotation> {
    let mut by_id: BTreeMap<Uuid, Annotation> = BTreeMap::new();
    for a in logs {
        match by_id.get(&a.id) {
            Some(existing) if join_key(existing) >= join_key(a) => {}
            _ => {
                by_id.insert(a.id, a.clone());
            }
        }
    }
    let mut out: Vec<_> = by_id.into_values().collect();
    out.sort_by(|a, b| a.canonical_cmp(b));
    out
}

/// Merges a peer's log into a stopped local run. Remote timestamps are
/// normalized by `offset` (peer clock minus local clock).
pub fn merge_runs(local: &PilotRun, remote_log: &[Annotation], offset: &ClockOffset) -> Result<PilotRun, SyncError> {
    if local.is_running() {
        return Err(SyncError::RunNotStopped);
    }
    if let Some(bad) = remote_log.iter().find(|a| a.run_id != local.id) {
        return Err(SyncError::RunIdMismatch { local: local.id, remote: bad.run_id });
    }
    let normalized: Vec<Annotation> = remote_log.iter().map(|a| normalize(a, offset, local.recording_start)).collect();
    let mut merged = local.clone();
    merged.replace_log(union_logs(local.annotations().iter().chain(&normalized)));
    Ok(merged)
}

/// Makes a replica hold exactly the authority's merged log.
pub fn adopt_authority_log(replica: &mut PilotRun, authority: &PilotRun) -> Result<(), SyncError> {
    if replica.id != authority.id {
        return Err(SyncError::RunIdMismatch { local: replica.id, remote: authority.id });
    }
    replica.replace_log(authority.annotations().to_vec());
    replica.recording_start = authority.recording_start;
    replica.recording_duration_ms = authority.recording_duration_ms;
    Ok(())
}
