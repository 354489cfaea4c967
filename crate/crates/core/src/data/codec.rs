//! Grayscale PFM and binary P6 PPM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Image, Plane};
use crate::tensor::{Shape, Tensor};

/// Encodes a `(1, 1, H, W)` map as little-endian grayscale PFM. Values are
/// stored as `f32`.
pub fn encode_pfm(map: &Plane) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.n() != 1 || s.c() != 1 {
        return Err(Error::shape(format!("PFM stores (1,1,H,W) maps, got {s:?}")));
    }
    let (h, w) = (s.h(), s.w());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    // rows are stored bottom to top
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map.at(0, 0, y, x) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Plane> {
    let mut pos = 0;
    let magic = header_line(bytes, &mut pos)?;
    match magic {
        "Pf" => {}
        "PF" => return Err(Error::format("color PFM is not supported")),
        other => return Err(Error::format(format!("not a PFM file (magic {other:?})"))),
    }
    let dims = header_line(bytes, &mut pos)?;
    let mut it = dims.split_whitespace();
    let (w, h) = match (it.next(), it.next(), it.next()) {
        (Some(w), Some(h), None) => (parse_dim(w)?, parse_dim(h)?),
        _ => return Err(Error::format(format!("bad PFM dimensions line {dims:?}"))),
    };
    let scale: f64 = header_line(bytes, &mut pos)?
        .trim()
        .parse()
        .map_err(|_| Error::format("bad PFM scale line"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let payload = &bytes[pos..];
    if payload.len() != 4 * w * h {
        return Err(Error::format(format!(
            "PFM payload is {} bytes, expected {}",
            payload.len(),
            4 * w * h
        )));
    }
    let mut map = Tensor::zeros(Shape::new(1, 1, h, w));
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, x) = (k / w, k % w);
        map.set(0, 0, h - 1 - row, x, v as f64);
    }
    Ok(map)
}

fn header_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("truncated PFM header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end])
        .map(str::trim_end)
        .map_err(|_| Error::format("PFM header is not text"))
}

fn parse_dim(s: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(format!("bad image dimension {s:?}"))),
    }
}

/// Quantizes an intensity in `[0, 1]` to a byte.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `(1, 3, H, W)` image as binary P6 with maxval 255.
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::shape(format!("PPM stores (1,3,H,W) images, got {s:?}")));
    }
    let (h, w) = (s.h(), s.w());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut tokens = [0usize; 3];
    if bytes.get(..2) != Some(b"P6") {
        return Err(Error::format("not a binary PPM (P6) file"));
    }
    pos += 2;
    for token in tokens.iter_mut() {
        // whitespace and comments before each header number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format("truncated PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *token = parse_dim(text)?;
    }
    let [w, h, maxval] = tokens;
    if maxval != 255 {
        return Err(Error::format(format!("PPM maxval {maxval} is not supported")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("missing whitespace after PPM header"));
    }
    let payload = &bytes[pos + 1..];
    if payload.len() != 3 * w * h {
        return Err(Error::format(format!(
            "PPM payload is {} bytes, expected {}",
            payload.len(),
            3 * w * h
        )));
    }
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for (k, px) in payload.chunks_exact(3).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            image.set(0, c, k / w, k % w, b as f64 / 255.0);
        }
    }
    Ok(image)
}

/// White where `mask` is true, black elsewhere.
pub fn mask_image(mask: &[bool], height: usize, width: usize) -> Result<Image> {
    if mask.len() != height * width {
        return Err(Error::shape("mask length does not match extents"));
    }
    let mut image = Tensor::zeros(Shape::new(1, 3, height, width));
    for (k, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..3 {
                image.set(0, c, k / width, k % width, 1.0);
            }
        }
    }
    Ok(image)
}

pub fn write_pfm(path: &Path, map: &Plane) -> Result<()> {
    Ok(std::fs::write(path, encode_pfm(map)?)?)
}

pub fn read_pfm(path: &Path) -> Result<Plane> {
    decode_pfm(&std::fs::read(path)?)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?)
}
