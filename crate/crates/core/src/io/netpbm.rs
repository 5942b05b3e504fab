//! Binary PGM (P5) and PPM (P6) rasters, 8 bits per sample.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::Image;

use super::write_atomic;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Values in `[0, 1]`; 1 maps to 255.
pub fn encode_pgm(values: &Array2<f32>) -> Vec<u8> {
    let (h, w) = values.dim();
    let mut out = header("P5", w, h);
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

/// Channels beyond the third are ignored; a single channel is replicated.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (c, h, w) = image.pixels.dim();
    let mut out = header("P6", w, h);
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(image.pixels[[ch.min(c - 1), y, x]]));
            }
        }
    }
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |m: &str| Error::Format {
        what: "netpbm",
        message: m.to_string(),
    };
    if bytes.len() < 2 {
        return Err(bad("missing magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| bad("malformed header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("header must end with one whitespace byte"));
    }
    if fields[2] != 255 {
        return Err(bad(&format!("only maxval 255 is supported, got {}", fields[2])));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        offset: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.offset..];
    if data.len() < need {
        return Err(Error::TruncatedPayload {
            expected: h.offset + need,
            found: bytes.len(),
        });
    }
    Ok(&data[..need])
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Array2<f32>> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Format {
            what: "pgm",
            message: "expected P5".into(),
        });
    }
    let data = payload(bytes, &h, 1)?;
    Ok(Array2::from_shape_fn((h.height, h.width), |(y, x)| data[y * h.width + x] as f32 / 255.0))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Format {
            what: "ppm",
            message: "expected P6".into(),
        });
    }
    let data = payload(bytes, &h, 3)?;
    Ok(Image::new(Array3::from_shape_fn((3, h.height, h.width), |(c, y, x)| {
        data[(y * h.width + x) * 3 + c] as f32 / 255.0
    })))
}

pub fn write_pgm(path: &Path, values: &Array2<f32>) -> Result<()> {
    write_atomic(path, &encode_pgm(values))
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_ppm(image))
}

pub fn read_pgm(path: &Path) -> Result<Array2<f32>> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?)
}
