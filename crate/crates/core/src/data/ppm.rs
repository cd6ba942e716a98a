//! Binary PPM (P6) with an 8-bit maxval.

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("image extent {width}x{height} is empty")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage::new(width, height, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean over all channels of all pixels.
    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} is out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "missing P6 magic"));
    }
    let mut header = Header { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(2, "expected whitespace after magic"));
    }
    let width = header.number("width")?;
    let height = header.number("height")?;
    header.skip_space_and_comments();
    let maxval_at = header.pos;
    let maxval = header.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(maxval_at, format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::format(
            maxval_at,
            format!("maxval {maxval} is not supported (only 255)"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(header.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(header.pos, "expected whitespace after maxval"));
    }
    let start = header.pos + 1;
    let expected = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| Error::format(maxval_at, "image dimensions overflow"))?;
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated raster: {width}x{height} needs {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            start + expected,
            format!("{} unexpected bytes after raster", payload.len() - expected),
        ));
    }
    RgbImage::new(width, height, payload.to_vec())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}
