//! Binary PPM (P6, 8-bit) frames. Byte `b` maps to `b / 255`.

use std::path::Path;

use ndarray::Array3;

use crate::autoencoder::ImageFrame;
use crate::error::{Error, Result};

pub fn encode_ppm(frame: &ImageFrame) -> Vec<u8> {
    let (_, h, w) = frame.pixels.dim();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(frame.pixels[[c, y, x]]));
            }
        }
    }
    out
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses a P6 image with maxval 255. Dimensions must be multiples of 8.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageFrame> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("malformed PPM header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("expected P6 magic, got {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("malformed PPM header field {s}")));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * w * h;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() == need)
        .ok_or_else(|| Error::Format(format!("PPM raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos))))?;
    let pixels = Array3::from_shape_fn((3, h, w), |(c, y, x)| raster[3 * (y * w + x) + c] as f64 / 255.0);
    ImageFrame::new(pixels)
}

pub fn write_frame(path: &Path, frame: &ImageFrame) -> Result<()> {
    super::write_atomic(path, &encode_ppm(frame))
}

pub fn read_frame(path: &Path) -> Result<ImageFrame> {
    decode_ppm(&super::read_file(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
