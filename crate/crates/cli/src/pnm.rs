//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Quantize `[0, 1]` to a byte; out-of-range values are clamped.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut out = header("P5", width, height);
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height, "ppm pixel count");
    let mut out = header("P6", width, height);
    out.extend(rgb.iter().flatten());
    out
}

/// Grayscale image from a `[0, 1]` plane.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    std::fs::write(path, encode_pgm(width, height, &bytes)).with_context(|| format!("writing {}", path.display()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    std::fs::write(path, encode_ppm(width, height, rgb)).with_context(|| format!("writing {}", path.display()))
}

/// Parsed single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn values(&self) -> Vec<f32> {
        self.pixels.iter().map(|&b| from_byte(b)).collect()
    }
}

fn skip_space_and_comments(buf: &[u8], mut i: usize) -> usize {
    loop {
        while i < buf.len() && buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < buf.len() && buf[i] == b'#' {
            while i < buf.len() && buf[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn header_number(buf: &[u8], i: &mut usize) -> Result<usize> {
    *i = skip_space_and_comments(buf, *i);
    let start = *i;
    while *i < buf.len() && buf[*i].is_ascii_digit() {
        *i += 1;
    }
    if start == *i {
        bail!("malformed PNM header");
    }
    Ok(std::str::from_utf8(&buf[start..*i])?.parse()?)
}

pub fn decode_pgm(buf: &[u8]) -> Result<Gray> {
    if !buf.starts_with(b"P5") {
        bail!("not a binary PGM (expected P5)");
    }
    let mut i = 2;
    let width = header_number(buf, &mut i)?;
    let height = header_number(buf, &mut i)?;
    let maxval = header_number(buf, &mut i)?;
    if maxval != 255 {
        bail!("only 8-bit PGM is supported (maxval {maxval})");
    }
    if i >= buf.len() || !buf[i].is_ascii_whitespace() {
        bail!("malformed PGM header");
    }
    let data = &buf[i + 1..];
    if data.len() != width * height {
        bail!("PGM holds {} bytes for a {width}x{height} image", data.len());
    }
    Ok(Gray { width, height, pixels: data.to_vec() })
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let buf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_pgm(&buf).with_context(|| format!("parsing {}", path.display()))
}
