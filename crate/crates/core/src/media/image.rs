//! Pixel-level helpers: cropping snapshots and preparing images for reports.

use std::io::Cursor;

use bytes::Bytes;
use image::{ImageFormat, RgbImage};

use super::frame::{Frame, FrameEncoding, Region};
use super::MediaError;

pub fn jpeg_dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Jpeg).into_dimensions().ok()
}

fn to_rgb(frame: &Frame) -> Result<RgbImage, MediaError> {
    match frame.header.encoding {
        FrameEncoding::RawRgb => RgbImage::from_raw(frame.header.width, frame.header.height, frame.bytes.to_vec())
            .ok_or_else(|| MediaError::Corrupt("raw frame size does not match dimensions".into())),
        FrameEncoding::Jpeg => image::load_from_memory_with_format(&frame.bytes, ImageFormat::Jpeg)
            .map(|i| i.to_rgb8())
            .map_err(|e| MediaError::Corrupt(e.to_string())),
    }
}

pub fn encode_jpeg(img: &RgbImage) -> Result<Vec<u8>, MediaError> {
    let mut out = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, 90)
        .encode_image(img)
        .map_err(|e| MediaError::Corrupt(e.to_string()))?;
    Ok(out)
}

/// Returns the frame payload cropped to `region`. A missing or full-frame
/// region returns the original bytes untouched.
pub fn crop(frame: &Frame, region: Option<&Region>) -> Result<Bytes, MediaError> {
    let (w, h) = (frame.header.width, frame.header.height);
    let Some(r) = region.filter(|r| !r.is_full(w, h)) else {
        return Ok(frame.bytes.clone());
    };
    if !r.fits(w, h) {
        return Err(MediaError::InvalidRegion(*r));
    }
    let cropped = image::imageops::crop_imm(&to_rgb(frame)?, r.x, r.y, r.w, r.h).to_image();
    Ok(match frame.header.encoding {
        FrameEncoding::RawRgb => Bytes::from(cropped.into_raw()),
        FrameEncoding::Jpeg => Bytes::from(encode_jpeg(&cropped)?),
    })
}

/// `(mime, bytes)` suitable for a `data:` URI. Raw frames become PNG.
pub fn embeddable(frame: &Frame, region: Option<&Region>) -> Result<(&'static str, Vec<u8>), MediaError> {
    let bytes = crop(frame, region)?;
    match frame.header.encoding {
        FrameEncoding::Jpeg => Ok(("image/jpeg", bytes.to_vec())),
        FrameEncoding::RawRgb => {
            let (w, h) = region.map_or((frame.header.width, frame.header.height), |r| (r.w, r.h));
            let img = RgbImage::from_raw(w, h, bytes.to_vec()).ok_or_else(|| MediaError::Corrupt("raw size".into()))?;
            let mut out = Vec::new();
            img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).map_err(|e| MediaError::Corrupt(e.to_string()))?;
            Ok(("image/png", out))
        }
    }
}
