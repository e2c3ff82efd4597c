//! Append-only frame container plus timestamp index.
//!
//! Layout of `archives/<id>/`:
//!
//! * `<stream>.frames`: records of `[u32 BE header length][header JSON][payload]`
//! * `<stream>.index.json`: `[{seq, capture_time, byte_offset}, ...]`
//! * `archive.json`: [`ArchiveMeta`]
//!
//! The index and meta sidecars are written when the archive is sealed.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use super::frame::{Frame, FrameHeader};
use super::MediaError;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub seq: u64,
    pub capture_time: Timestamp,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub id: Uuid,
    pub run_id: Uuid,
    pub request_time: Timestamp,
    pub start_wall: Option<Timestamp>,
    pub streams: Vec<String>,
    pub sealed: bool,
    pub duration_ms: Option<i64>,
}

pub fn container_path(dir: &Path, stream: &str) -> PathBuf {
    dir.join(format!("{stream}.frames"))
}

pub fn index_path(dir: &Path, stream: &str) -> PathBuf {
    dir.join(format!("{stream}.index.json"))
}

pub fn encode_record(frame: &Frame) -> Result<Vec<u8>, MediaError> {
    let header = serde_json::to_vec(&frame.header).map_err(|e| MediaError::Corrupt(e.to_string()))?;
    let len = u32::try_from(header.len()).map_err(|_| MediaError::Corrupt("frame header too large".into()))?;
    let mut out = Vec::with_capacity(4 + header.len() + frame.bytes.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&frame.bytes);
    Ok(out)
}

/// Reads the record starting at `offset`.
pub fn read_record(file: &mut File, offset: u64) -> Result<Frame, MediaError> {
    file.seek(SeekFrom::Start(offset))?;
    let mut len = [0u8; 4];
    file.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_be_bytes(len) as usize];
    file.read_exact(&mut header)?;
    let header: FrameHeader = serde_json::from_slice(&header).map_err(|e| MediaError::Corrupt(e.to_string()))?;
    let mut payload = vec![0u8; header.len as usize];
    file.read_exact(&mut payload)?;
    Ok(Frame { header, bytes: payload.into() })
}

struct Track {
    file: File,
    index: Vec<IndexEntry>,
    next_offset: u64,
}

/// An archive being written. Each stream has its own track lock, so streams
/// append without waiting on one another.
pub struct Recording {
    meta: Mutex<ArchiveMeta>,
    dir: PathBuf,
    tracks: BTreeMap<String, Mutex<Track>>,
}

impl Recording {
    pub fn create(dir: PathBuf, id: Uuid, run_id: Uuid, streams: &[String], request_time: Timestamp) -> Result<Self, MediaError> {
        fs::create_dir_all(&dir)?;
        let mut tracks = BTreeMap::new();
        for s in streams {
            let file = OpenOptions::new().create(true).truncate(true).read(true).write(true).open(container_path(&dir, s))?;
            tracks.insert(s.clone(), Mutex::new(Track { file, index: Vec::new(), next_offset: 0 }));
        }
        let meta = ArchiveMeta {
            id,
            run_id,
            request_time,
            start_wall: None,
            streams: streams.to_vec(),
            sealed: false,
            duration_ms: None,
        };
        Ok(Recording { meta: Mutex::new(meta), dir, tracks })
    }

    pub fn id(&self) -> Uuid {
        self.meta.lock().expect("meta lock").id
    }

    pub fn start_wall(&self) -> Option<Timestamp> {
        self.meta.lock().expect("meta lock").start_wall
    }

    pub fn records(&self, stream: &str) -> bool {
        self.tracks.contains_key(stream)
    }

    /// Appends a frame if it belongs to the recording. Returns whether it was
    /// written. The first frame at or after the request time anchors media
    /// time; frames older than the anchor are not recorded.
    pub fn append(&self, frame: &Frame) -> Result<bool, MediaError> {
        let Some(track) = self.tracks.get(frame.stream_id()) else {
            return Ok(false);
        };
        {
            let mut meta = self.meta.lock().expect("meta lock");
            if frame.capture_time() < meta.request_time {
                return Ok(false);
            }
            match meta.start_wall {
                None => meta.start_wall = Some(frame.capture_time()),
                Some(s) if frame.capture_time() < s => return Ok(false),
                Some(_) => {}
            }
        }
        let record = encode_record(frame)?;
        let mut t = track.lock().expect("track lock");
        let offset = t.next_offset;
        t.file.seek(SeekFrom::Start(offset))?;
        t.file.write_all(&record)?;
        t.next_offset += record.len() as u64;
        t.index.push(IndexEntry { seq: frame.seq(), capture_time: frame.capture_time(), byte_offset: offset });
        Ok(true)
    }

    pub fn index_snapshot(&self, stream: &str) -> Option<Vec<IndexEntry>> {
        self.tracks.get(stream).map(|t| t.lock().expect("track lock").index.clone())
    }

    pub fn read(&self, stream: &str, entry: &IndexEntry) -> Result<Frame, MediaError> {
        let track = self.tracks.get(stream).ok_or_else(|| MediaError::UnknownStream(stream.to_string()))?;
        let mut t = track.lock().expect("track lock");
        let frame = read_record(&mut t.file, entry.byte_offset);
        // keep the append position authoritative
        let end = t.next_offset;
        t.file.seek(SeekFrom::Start(end))?;
        frame
    }

    /// Writes the sidecars and returns the immutable archive.
    pub fn seal(self) -> Result<Archive, MediaError> {
        let mut meta = self.meta.into_inner().expect("meta lock");
        let mut indexes = BTreeMap::new();
        let mut last = None::<Timestamp>;
        for (stream, track) in self.tracks {
            let mut t = track.into_inner().expect("track lock");
            t.file.flush()?;
            t.file.sync_all()?;
            if let Some(e) = t.index.last() {
                last = Some(last.map_or(e.capture_time, |l| l.max(e.capture_time)));
            }
            fs::write(index_path(&self.dir, &stream), serde_json::to_vec(&t.index).map_err(|e| MediaError::Corrupt(e.to_string()))?)?;
            indexes.insert(stream, t.index);
        }
        meta.sealed = true;
        meta.duration_ms = Some(match (meta.start_wall, last) {
            (Some(s), Some(l)) => l.millis_since(s),
            _ => 0,
        });
        fs::write(self.dir.join("archive.json"), serde_json::to_vec_pretty(&meta).map_err(|e| MediaError::Corrupt(e.to_string()))?)?;
        Ok(Archive { meta, dir: self.dir, indexes })
    }
}

/// A sealed, read-only archive.
#[derive(Debug, Clone)]
pub struct Archive {
    meta: ArchiveMeta,
    dir: PathBuf,
    indexes: BTreeMap<String, Vec<IndexEntry>>,
}

impl Archive {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, MediaError> {
        let dir = dir.into();
        let meta: ArchiveMeta = serde_json::from_slice(&fs::read(dir.join("archive.json"))?)
            .map_err(|e| MediaError::Corrupt(e.to_string()))?;
        let mut indexes = BTreeMap::new();
        for s in &meta.streams {
            let idx: Vec<IndexEntry> = serde_json::from_slice(&fs::read(index_path(&dir, s))?)
                .map_err(|e| MediaError::Corrupt(e.to_string()))?;
            let ordered = idx.windows(2).all(|w| w[0].capture_time <= w[1].capture_time && w[0].byte_offset < w[1].byte_offset);
            if !ordered {
                return Err(MediaError::Corrupt(format!("index for `{s}` is not ordered")));
            }
            indexes.insert(s.clone(), idx);
        }
        Ok(Archive { meta, dir, indexes })
    }

    pub fn meta(&self) -> &ArchiveMeta {
        &self.meta
    }

    pub fn id(&self) -> Uuid {
        self.meta.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn start_wall(&self) -> Option<Timestamp> {
        self.meta.start_wall
    }

    pub fn duration_ms(&self) -> i64 {
        self.meta.duration_ms.unwrap_or(0)
    }

    pub fn index(&self, stream: &str) -> Option<&[IndexEntry]> {
        self.indexes.get(stream).map(Vec::as_slice)
    }

    pub fn streams(&self) -> impl Iterator<Item = &str> {
        self.indexes.keys().map(String::as_str)
    }

    /// `t − start_wall`, clamped to `[0, duration]`.
    pub fn wall_to_media(&self, t: Timestamp) -> Result<i64, MediaError> {
        let start = self.meta.start_wall.ok_or(MediaError::NotAnchored)?;
        Ok(t.millis_since(start).clamp(0, self.duration_ms()))
    }

    /// Latest index entry with `capture_time <= t`; ties resolve to the last.
    pub fn entry_at_or_before(&self, stream: &str, t: Timestamp) -> Option<&IndexEntry> {
        let idx = self.indexes.get(stream)?;
        let n = idx.partition_point(|e| e.capture_time <= t);
        n.checked_sub(1).map(|i| &idx[i])
    }

    pub fn entry_by_seq(&self, stream: &str, seq: u64) -> Option<&IndexEntry> {
        let idx = self.indexes.get(stream)?;
        idx.binary_search_by_key(&seq, |e| e.seq).ok().map(|i| &idx[i])
    }

    pub fn read(&self, stream: &str, entry: &IndexEntry) -> Result<Frame, MediaError> {
        let mut f = File::open(container_path(&self.dir, stream))?;
        read_record(&mut f, entry.byte_offset)
    }

    pub fn frame_at(&self, stream: &str, offset: i64) -> Result<Frame, MediaError> {
        let duration = self.duration_ms();
        if !(0..=duration).contains(&offset) {
            return Err(MediaError::OffsetOutOfRange { offset, duration });
        }
        let start = self.meta.start_wall.ok_or(MediaError::NotAnchored)?;
        let entry = self
            .entry_at_or_before(stream, start + offset)
            .ok_or(MediaError::NoFrameAvailable)?;
        self.read(stream, entry)
    }

    pub fn frame_by_seq(&self, stream: &str, seq: u64) -> Result<Frame, MediaError> {
        let e = self.entry_by_seq(stream, seq).ok_or(MediaError::NoFrameAvailable)?;
        self.read(stream, e)
    }

    /// SHA-256 over meta, indexes, and containers, in a fixed order.
    pub fn content_hash(&self) -> Result<String, MediaError> {
        let mut h = Sha256::new();
        h.update(fs::read(self.dir.join("archive.json"))?);
        for s in self.indexes.keys() {
            h.update(s.as_bytes());
            h.update(fs::read(index_path(&self.dir, s))?);
            h.update(fs::read(container_path(&self.dir, s))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::frame::FrameEncoding;

    fn frame(seq: u64, t: i64) -> Frame {
        Frame::new("fpv", seq, Timestamp(t), (2, 1), FrameEncoding::RawRgb, vec![seq as u8; 6])
    }

    #[test]
    fn record_layout_is_length_prefixed_header_then_payload() {
        let f = frame(1, 1000);
        let rec = encode_record(&f).unwrap();
        let hlen = u32::from_be_bytes(rec[..4].try_into().unwrap()) as usize;
        let header: FrameHeader = serde_json::from_slice(&rec[4..4 + hlen]).unwrap();
        assert_eq!(header, f.header);
        assert_eq!(&rec[4 + hlen..], &f.bytes[..]);
    }

    #[test]
    fn anchor_seal_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::create(dir.path().join("a"), Uuid::nil(), Uuid::nil(), &["fpv".into()], Timestamp(1000)).unwrap();
        assert!(!rec.append(&frame(1, 990)).unwrap());
        assert!(rec.append(&frame(2, 1020)).unwrap());
        assert!(rec.append(&frame(3, 1087)).unwrap());
        assert_eq!(rec.start_wall(), Some(Timestamp(1020)));
        let a = rec.seal().unwrap();
        assert_eq!(a.duration_ms(), 67);
        assert_eq!(a.wall_to_media(Timestamp(1020)).unwrap(), 0);
        assert_eq!(a.frame_at("fpv", 0).unwrap().seq(), 2);
        assert_eq!(a.frame_at("fpv", 66).unwrap().seq(), 2);
        assert_eq!(a.frame_at("fpv", 67).unwrap().seq(), 3);
        assert!(matches!(a.frame_at("fpv", 68), Err(MediaError::OffsetOutOfRange { .. })));

        let reopened = Archive::open(a.dir()).unwrap();
        assert_eq!(reopened.meta(), a.meta());
        assert_eq!(reopened.content_hash().unwrap(), a.content_hash().unwrap());
    }

    #[test]
    fn single_frame_has_zero_duration() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::create(dir.path().to_path_buf(), Uuid::nil(), Uuid::nil(), &["fpv".into()], Timestamp(0)).unwrap();
        rec.append(&frame(1, 5)).unwrap();
        assert_eq!(rec.seal().unwrap().duration_ms(), 0);
    }
}
