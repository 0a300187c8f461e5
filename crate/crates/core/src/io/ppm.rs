//! Binary PPM (`P6`, maxval 255) reading and writing.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

/// Row-major interleaved RGB with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        RgbImage {
            width,
            height,
            data: vec![fill; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a binary PPM (expected P6) at byte {offset}")]
    BadMagic { offset: usize },
    #[error("malformed header at byte {offset}: {detail}")]
    BadHeader { offset: usize, detail: String },
    #[error("unsupported maxval {found} at byte {offset} (only 255)")]
    BadMaxval { offset: usize, found: usize },
    #[error("short payload at byte {offset}: expected {expected} bytes, found {found}")]
    ShortPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skip whitespace and `#` comments.
    fn skip_blank(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<(usize, usize), PpmError> {
        self.skip_blank();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let digits = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        let v = digits.parse::<usize>().map_err(|_| PpmError::BadHeader {
            offset: start,
            detail: format!("expected {what}"),
        })?;
        Ok((v, start))
    }
}

pub fn parse_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::BadMagic { offset: 0 });
    }
    let mut h = Header { bytes, pos: 2 };
    if h.pos < bytes.len() && !bytes[h.pos].is_ascii_whitespace() && bytes[h.pos] != b'#' {
        return Err(PpmError::BadMagic { offset: 0 });
    }
    let (width, _) = h.number("width")?;
    let (height, _) = h.number("height")?;
    let (maxval, at) = h.number("maxval")?;
    if maxval != 255 {
        return Err(PpmError::BadMaxval {
            offset: at,
            found: maxval,
        });
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => {
            return Err(PpmError::BadHeader {
                offset: h.pos,
                detail: "expected one whitespace byte before the raster".into(),
            })
        }
    }
    if width == 0 || height == 0 {
        return Err(PpmError::BadHeader {
            offset: 2,
            detail: "empty image".into(),
        });
    }
    let expected = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or(PpmError::BadHeader {
            offset: 2,
            detail: "image dimensions overflow".into(),
        })?;
    let payload = &bytes[h.pos..];
    if payload.len() < expected {
        return Err(PpmError::ShortPayload {
            offset: h.pos,
            expected,
            found: payload.len(),
        });
    }
    Ok(RgbImage {
        width,
        height,
        data: payload[..expected].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_ppm(&bytes)?)
}

pub fn save_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
