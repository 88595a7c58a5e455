//! Binary netpbm I/O: P6 (RGB) images in and out, P5 (gray) heatmaps out.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Grid, ImageTensor};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let g = img.grid();
    let mut out = format!("P6\n{} {}\n255\n", g.width, g.height).into_bytes();
    out.extend(g.data.iter().map(|&v| quantize(v)));
    out
}

/// Gray image from `height × width` values in `[0, 1]`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    debug_assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |msg: &str| Error::format("netpbm", msg);
    if bytes.len() < 2 {
        return Err(bad("truncated header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected an unsigned integer"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_start: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::format("ppm", "expected P6 magic"));
    }
    if h.maxval == 0 || h.maxval > 255 {
        return Err(Error::format("ppm", format!("unsupported maxval {}", h.maxval)));
    }
    let n = h.width * h.height * 3;
    let body = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::format("ppm", "truncated pixel data"))?;
    let maxval = h.maxval as f64;
    let data = body.iter().map(|&b| (b as f64 / maxval).min(1.0)).collect();
    ImageTensor::new(Grid::from_vec(h.height, h.width, 3, data)?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(width, height, values)).map_err(|e| Error::io(path, e))
}
