//! Binary PGM (P5) / PPM (P6) image files, 8-bit, maxval 255.
//!
//! Writing quantizes with round(v * 255); a write/read round trip therefore
//! differs from the original by at most 1/255 per pixel and is bit-exact
//! thereafter.

use std::fs;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend(img.pixels().iter().map(|&v| quantize(v)));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    let (w, h, data) = parse_netpbm(&bytes, b"P5", 1)?;
    GrayImage::new(h, w, data.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Write a [3,H,W] tensor as binary PPM.
pub fn write_ppm(t: &Tensor, path: &Path) -> Result<()> {
    let sh = t.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::Contract(format!("write_ppm expects [3,H,W], got {sh:?}")));
    }
    let (h, w) = (sh[1], sh[2]);
    let plane = h * w;
    let d = t.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..plane {
        bytes.push(quantize(d[i]));
        bytes.push(quantize(d[plane + i]));
        bytes.push(quantize(d[2 * plane + i]));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a binary PPM into a [3,H,W] tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, data) = parse_netpbm(&bytes, b"P6", 3)?;
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        out[i] = data[3 * i] as f64 / 255.0;
        out[plane + i] = data[3 * i + 1] as f64 / 255.0;
        out[2 * plane + i] = data[3 * i + 2] as f64 / 255.0;
    }
    Tensor::new(&[3, h, w], out)
}

fn parse_netpbm(bytes: &[u8], magic: &[u8], samples: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let fail = |detail: String, offset: usize| Error::Format { detail, offset: offset as u64 };

    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fail(
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
            0,
        ));
    }
    pos += 2;

    let read_token = |pos: &mut usize| -> Result<usize> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail("expected an integer header field".into(), start));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("invalid integer header field".into(), start))
    };

    let w = read_token(&mut pos)?;
    let h = read_token(&mut pos)?;
    let maxval = read_token(&mut pos)?;
    if maxval != 255 {
        return Err(fail(format!("unsupported maxval {maxval} (only 255)"), pos));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail("missing whitespace after maxval".into(), pos));
    }
    pos += 1;
    if w == 0 || h == 0 {
        return Err(fail(format!("degenerate dimensions {w}x{h}"), 2));
    }
    let need = w * h * samples;
    if bytes.len() - pos < need {
        return Err(fail(
            format!("truncated pixel data: need {need} bytes, found {}", bytes.len() - pos),
            bytes.len(),
        ));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}
