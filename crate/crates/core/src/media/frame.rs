use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameEncoding {
    #[serde(rename = "JPEG")]
    Jpeg,
    #[serde(rename = "RAW_RGB")]
    RawRgb,
}

impl FrameEncoding {
    pub fn content_type(self) -> &'static str {
        match self {
            FrameEncoding::Jpeg => "image/jpeg",
            FrameEncoding::RawRgb => "application/x-raw-rgb",
        }
    }

    pub fn from_content_type(ct: &str) -> Option<Self> {
        match ct.trim().to_ascii_lowercase().as_str() {
            "image/jpeg" | "image/jpg" => Some(FrameEncoding::Jpeg),
            "application/x-raw-rgb" => Some(FrameEncoding::RawRgb),
            _ => None,
        }
    }
}

/// Per-record header of the archive container; also the metadata carried by
/// every frame in memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameHeader {
    pub stream_id: String,
    pub seq: u64,
    pub capture_time: Timestamp,
    pub width: u32,
    pub height: u32,
    pub encoding: FrameEncoding,
    #[serde(default)]
    pub time_substituted: bool,
    /// Payload length in bytes.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: FrameHeader,
    pub bytes: Bytes,
}

impl Frame {
    pub fn new(
        stream_id: impl Into<String>,
        seq: u64,
        capture_time: Timestamp,
        (width, height): (u32, u32),
        encoding: FrameEncoding,
        bytes: impl Into<Bytes>,
    ) -> Self {
        let bytes = bytes.into();
        Frame {
            header: FrameHeader {
                stream_id: stream_id.into(),
                seq,
                capture_time,
                width,
                height,
                encoding,
                time_substituted: false,
                len: bytes.len() as u64,
            },
            bytes,
        }
    }

    pub fn seq(&self) -> u64 {
        self.header.seq
    }

    pub fn capture_time(&self) -> Timestamp {
        self.header.capture_time
    }

    pub fn stream_id(&self) -> &str {
        &self.header.stream_id
    }
}

/// A frame as submitted by a producer, before the pipeline settles its
/// capture time.
#[derive(Debug, Clone)]
pub struct IncomingFrame {
    pub seq: u64,
    pub capture_time: Option<Timestamp>,
    pub width: u32,
    pub height: u32,
    pub encoding: FrameEncoding,
    pub bytes: Bytes,
}

impl From<Frame> for IncomingFrame {
    fn from(f: Frame) -> Self {
        IncomingFrame {
            seq: f.header.seq,
            capture_time: Some(f.header.capture_time),
            width: f.header.width,
            height: f.header.height,
            encoding: f.header.encoding,
            bytes: f.bytes,
        }
    }
}

/// Rectangle in frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Region {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && (self.x as u64 + self.w as u64) <= width as u64
            && (self.y as u64 + self.h as u64) <= height as u64
    }

    pub fn is_full(&self, width: u32, height: u32) -> bool {
        self.x == 0 && self.y == 0 && self.w == width && self.h == height
    }
}

/// Stable pointer to one frame of one stream, optionally cropped.
///
/// Text form: `fpv/000042.jpg` or `fpv/000042.jpg#x,y,w,h`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub stream_id: String,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{:06}.jpg", self.stream_id, self.seq)?;
        if let Some(r) = &self.region {
            write!(f, "#{},{},{},{}", r.x, r.y, r.w, r.h)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed image reference: {0}")]
pub struct BadImageRef(pub String);

impl FromStr for ImageRef {
    type Err = BadImageRef;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadImageRef(s.to_string());
        let (path, region) = match s.split_once('#') {
            Some((p, r)) => (p, Some(r)),
            None => (s, None),
        };
        let (stream_id, file) = path.rsplit_once('/').ok_or_else(bad)?;
        let seq_txt = file.strip_suffix(".jpg").ok_or_else(bad)?;
        if stream_id.is_empty() || seq_txt.is_empty() || !seq_txt.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let seq: u64 = seq_txt.parse().map_err(|_| bad())?;
        // only the canonical zero-padded form round-trips
        if format!("{seq:06}") != seq_txt {
            return Err(bad());
        }
        let region = match region {
            None => None,
            Some(r) => {
                let parts: Vec<u32> = r
                    .split(',')
                    .map(|p| p.parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
                match parts.as_slice() {
                    [x, y, w, h] => Some(Region { x: *x, y: *y, w: *w, h: *h }),
                    _ => return Err(bad()),
                }
            }
        };
        Ok(ImageRef { stream_id: stream_id.to_string(), seq, region })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_ref_text_form() {
        let r = ImageRef { stream_id: "fpv".into(), seq: 42, region: None };
        assert_eq!(r.to_string(), "fpv/000042.jpg");
        assert_eq!("fpv/000042.jpg".parse::<ImageRef>().unwrap(), r);

        let c = ImageRef { region: Some(Region { x: 1, y: 2, w: 3, h: 4 }), ..r };
        assert_eq!(c.to_string(), "fpv/000042.jpg#1,2,3,4");
        assert_eq!(c.to_string().parse::<ImageRef>().unwrap(), c);
    }

    #[test]
    fn image_ref_rejects_garbage() {
        for s in ["", "fpv", "fpv/42.jpg", "fpv/000042.png", "/000042.jpg", "fpv/000042.jpg#1,2"] {
            assert!(s.parse::<ImageRef>().is_err(), "{s}");
        }
    }

    #[test]
    fn region_bounds() {
        let r = Region { x: 10, y: 10, w: 54, h: 38 };
        assert!(r.fits(64, 48));
        assert!(!Region { w: 55, ..r }.fits(64, 48));
        assert!(!Region { w: 0, ..r }.fits(64, 48));
        assert!(Region { x: 0, y: 0, w: 64, h: 48 }.is_full(64, 48));
    }
}
