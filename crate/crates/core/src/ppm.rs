//! Binary PPM (P6, maxval 255) reader and writer. No image library: the
//! format is simple enough to handle byte-exactly by hand, which keeps
//! outputs reproducible across platforms.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PpmImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Validation(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Channel `c` (0=R, 1=G, 2=B) of pixel `(x, y)`.
    pub fn channel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

pub fn read_p6(path: impl AsRef<Path>) -> Result<PpmImage> {
    parse_p6(&fs::read(path)?)
}

pub fn parse_p6(bytes: &[u8]) -> Result<PpmImage> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::Format("not a P6 PPM (missing magic)".into()));
    }
    pos += 2;

    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = parse_header_int(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval} (only 255)")));
    }
    // exactly one whitespace byte separates the header from the pixel data
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace before pixel data".into())),
    }
    let need = width * height * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("truncated pixel data: need {need} bytes")))?;
    PpmImage::new(width, height, data.to_vec())
}

fn parse_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // skip whitespace and '#' comments
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(b) = bytes.get(*pos) {
                    *pos += 1;
                    if *b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while matches!(bytes.get(*pos), Some(b) if b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Format("malformed PPM header (expected an integer)".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("malformed PPM header integer".into()))
}

pub fn to_p6_bytes(image: &PpmImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_p6(image: &PpmImage, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_p6_bytes(image))?;
    Ok(())
}
