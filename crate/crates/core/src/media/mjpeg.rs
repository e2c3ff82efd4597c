//! `multipart/x-mixed-replace` framing for frame push and relay.
//!
//! Each part carries `Content-Type`, `Content-Length`, `X-Seq`, and
//! `X-Capture-Time` (ms since epoch). `X-Width`/`X-Height` are written on
//! relay and optional on ingest (JPEG dimensions are read from the image).

use bytes::Bytes;

use super::frame::{Frame, FrameEncoding, IncomingFrame};
use crate::time::Timestamp;

pub const DEFAULT_BOUNDARY: &str = "frame";

pub fn content_type(boundary: &str) -> String {
    format!("multipart/x-mixed-replace; boundary={boundary}")
}

/// Extracts the boundary parameter from a multipart content type.
pub fn boundary_from_content_type(ct: &str) -> Option<String> {
    let mut parts = ct.split(';');
    let mime = parts.next()?.trim().to_ascii_lowercase();
    if !mime.starts_with("multipart/") {
        return None;
    }
    parts
        .filter_map(|p| p.trim().split_once('='))
        .find(|(k, _)| k.trim().eq_ignore_ascii_case("boundary"))
        .map(|(_, v)| v.trim().trim_matches('"').to_string())
        .filter(|b| !b.is_empty())
}

pub fn encode_part(boundary: &str, frame: &Frame) -> Vec<u8> {
    let h = &frame.header;
    let mut out = format!(
        "--{boundary}\r\nContent-Type: {}\r\nContent-Length: {}\r\nX-Seq: {}\r\nX-Capture-Time: {}\r\nX-Width: {}\r\nX-Height: {}\r\n\r\n",
        h.encoding.content_type(),
        frame.bytes.len(),
        h.seq,
        h.capture_time.as_millis(),
        h.width,
        h.height,
    )
    .into_bytes();
    out.extend_from_slice(&frame.bytes);
    out.extend_from_slice(b"\r\n");
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MultipartError {
    #[error("missing or bad header `{0}`")]
    BadHeader(&'static str),
    #[error("unsupported content type `{0}`")]
    UnsupportedType(String),
    #[error("malformed part: {0}")]
    Malformed(String),
}

impl Part {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn to_incoming(&self) -> Result<IncomingFrame, MultipartError> {
        let ct = self.header("Content-Type").unwrap_or("image/jpeg");
        let encoding = FrameEncoding::from_content_type(ct).ok_or_else(|| MultipartError::UnsupportedType(ct.to_string()))?;
        let seq = self
            .header("X-Seq")
            .and_then(|v| v.trim().parse::<u64>().ok())
            .ok_or(MultipartError::BadHeader("X-Seq"))?;
        let capture_time = match self.header("X-Capture-Time") {
            None => None,
            Some(v) => Some(Timestamp(v.trim().parse::<i64>().map_err(|_| MultipartError::BadHeader("X-Capture-Time"))?)),
        };
        let dim = |name: &'static str| -> Result<Option<u32>, MultipartError> {
            self.header(name).map(|v| v.trim().parse::<u32>().map_err(|_| MultipartError::BadHeader(name))).transpose()
        };
        let (width, height) = match (dim("X-Width")?, dim("X-Height")?) {
            (Some(w), Some(h)) => (w, h),
            _ if encoding == FrameEncoding::Jpeg => super::image::jpeg_dimensions(&self.body)
                .ok_or_else(|| MultipartError::Malformed("undecodable JPEG header".into()))?,
            _ => return Err(MultipartError::BadHeader("X-Width")),
        };
        Ok(IncomingFrame { seq, capture_time, width, height, encoding, bytes: self.body.clone() })
    }
}

/// Incremental parser over a multipart byte stream.
#[derive(Debug)]
pub struct MultipartParser {
    delimiter: Vec<u8>,
    buf: Vec<u8>,
    done: bool,
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() || hay.len() < needle.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

impl MultipartParser {
    pub fn new(boundary: &str) -> Self {
        MultipartParser { delimiter: format!("--{boundary}").into_bytes(), buf: Vec::new(), done: false }
    }

    pub fn push(&mut self, chunk: &[u8]) {
        self.buf.extend_from_slice(chunk);
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Returns the next complete part, `None` if more bytes are needed.
    pub fn next_part(&mut self) -> Option<Result<Part, MultipartError>> {
        if self.done {
            return None;
        }
        let start = find(&self.buf, &self.delimiter)?;
        let after = start + self.delimiter.len();
        if self.buf.len() < after + 2 {
            return None;
        }
        if &self.buf[after..after + 2] == b"--" {
            self.done = true;
            self.buf.clear();
            return None;
        }
        let header_end = find(&self.buf[after..], b"\r\n\r\n")? + after;
        let head = String::from_utf8_lossy(&self.buf[after..header_end]).into_owned();
        let mut headers = Vec::new();
        for line in head.split("\r\n").map(str::trim).filter(|l| !l.is_empty()) {
            match line.split_once(':') {
                Some((k, v)) => headers.push((k.trim().to_string(), v.trim().to_string())),
                None => {
                    self.buf.drain(..header_end + 4);
                    return Some(Err(MultipartError::Malformed(format!("header line `{line}`"))));
                }
            }
        }
        let body_start = header_end + 4;
        let length = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("Content-Length"))
            .map(|(_, v)| v.parse::<usize>());
        let (body_end, consumed) = match length {
            Some(Ok(n)) => {
                if self.buf.len() < body_start + n {
                    return None;
                }
                (body_start + n, body_start + n)
            }
            Some(Err(_)) => {
                self.buf.drain(..body_start);
                return Some(Err(MultipartError::BadHeader("Content-Length")));
            }
            None => {
                let mut needle = b"\r\n".to_vec();
                needle.extend_from_slice(&self.delimiter);
                let rel = find(&self.buf[body_start..], &needle)?;
                (body_start + rel, body_start + rel)
            }
        };
        let body = Bytes::copy_from_slice(&self.buf[body_start..body_end]);
        self.buf.drain(..consumed);
        Some(Ok(Part { headers, body }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seq: u64) -> Frame {
        Frame::new("fpv", seq, Timestamp(1000 + seq as i64), (2, 1), FrameEncoding::RawRgb, vec![seq as u8; 6])
    }

    #[test]
    fn boundary_parsing() {
        assert_eq!(boundary_from_content_type("multipart/x-mixed-replace; boundary=frame").as_deref(), Some("frame"));
        assert_eq!(boundary_from_content_type("multipart/x-mixed-replace;boundary=\"b 1\"").as_deref(), Some("b 1"));
        assert_eq!(boundary_from_content_type("image/jpeg"), None);
    }

    #[test]
    fn parts_survive_arbitrary_chunking() {
        let mut stream = Vec::new();
        for s in 1..=3 {
            stream.extend(encode_part("frame", &frame(s)));
        }
        stream.extend_from_slice(b"--frame--\r\n");
        for chunk in [1, 3, 7, stream.len()] {
            let mut p = MultipartParser::new("frame");
            let mut got = Vec::new();
            for c in stream.chunks(chunk) {
                p.push(c);
                while let Some(part) = p.next_part() {
                    got.push(part.unwrap().to_incoming().unwrap());
                }
            }
            assert!(p.is_done());
            assert_eq!(got.iter().map(|f| f.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
            assert_eq!(got[1].capture_time, Some(Timestamp(1002)));
            assert_eq!(&got[2].bytes[..], &[3u8; 6]);
        }
    }

    #[test]
    fn parts_without_length_use_the_delimiter() {
        let raw = b"--frame\r\nContent-Type: application/x-raw-rgb\r\nX-Seq: 4\r\nX-Width: 1\r\nX-Height: 1\r\n\r\nabc\r\n--frame--";
        let mut p = MultipartParser::new("frame");
        p.push(raw);
        let f = p.next_part().unwrap().unwrap().to_incoming().unwrap();
        assert_eq!((f.seq, f.capture_time, &f.bytes[..]), (4, None, &b"abc"[..]));
    }

    #[test]
    fn missing_seq_is_rejected() {
        let raw = b"--frame\r\nContent-Type: image/jpeg\r\nContent-Length: 1\r\n\r\nx\r\n";
        let mut p = MultipartParser::new("frame");
        p.push(raw);
        let part = p.next_part().unwrap().unwrap();
        assert_eq!(part.to_incoming().unwrap_err(), MultipartError::BadHeader("X-Seq"));
    }
}
