//! Binary Netpbm images: PPM (P6) and PGM (P5), 8 or 16 bits per sample.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image with samples scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 {
        return Err("file too short".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed header number".to_string())?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("invalid dimensions {width}x{height} or maxval {maxval}"));
    }
    Ok(Header { magic, width, height, maxval, data_start: pos + 1 })
}

fn samples(bytes: &[u8], h: &Header, count: usize) -> std::result::Result<Vec<u16>, String> {
    let raster = &bytes[h.data_start..];
    let wide = h.maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    if raster.len() < need {
        return Err(format!("raster has {} bytes, expected {need}", raster.len()));
    }
    Ok(if wide {
        raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster[..need].iter().map(|&b| b as u16).collect()
    })
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let raw = samples(bytes, &h, h.width * h.height * 3)?;
    let scale = 1.0 / h.maxval as f64;
    Ok(RgbImage { width: h.width, height: h.height, data: raw.into_iter().map(|v| v as f64 * scale).collect() })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|m| Error::format(path, m))
}

/// 8-bit P6 from interleaved RGB bytes.
pub fn encode_ppm8(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_ppm8(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm8(width, height, rgb)).map_err(|e| Error::io(path, e))
}

/// 16-bit P5, samples big-endian.
pub fn encode_pgm16(width: usize, height: usize, gray: &[u16]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in gray {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Decodes P5 of either depth into raw sample values and the maxval.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u16>, usize), String> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let px = samples(bytes, &h, h.width * h.height)?;
    Ok((h.width, h.height, px, h.maxval))
}
