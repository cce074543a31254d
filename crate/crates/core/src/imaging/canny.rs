//! Canny edge detection.
//!
//! Fixed five-stage pipeline: 5x5 Gaussian blur (sigma = 1.0, clamp-to-edge)
//! -> Sobel magnitude/direction -> non-maximum suppression with the direction
//! quantized to four bins -> double threshold -> hysteresis keeping weak
//! pixels that are 8-connected to a strong pixel, transitively. Border pixels
//! are suppressed by NMS. Zero-magnitude pixels never qualify as edges, so a
//! constant image yields an empty map even at zero thresholds.
//!
//! Tap accumulation is row-major throughout; that ordering is part of the
//! pipeline definition so independent implementations agree bit-for-bit.

use super::{EdgeMap, GrayImage};
use crate::error::{Error, Result};

/// Detect edges; `thre1` is the weak threshold, `thre2` the strong one.
pub fn canny(img: &GrayImage, thre1: f64, thre2: f64) -> Result<EdgeMap> {
    if !(0.0..=f64::INFINITY).contains(&thre1) || thre1 > thre2 {
        return Err(Error::Contract(format!(
            "canny thresholds must satisfy 0 <= thre1 <= thre2, got ({thre1}, {thre2})"
        )));
    }
    let h = img.height();
    let w = img.width();

    let blurred = gaussian_blur_5x5(img.pixels(), h, w);
    let (mag, dir) = sobel(&blurred, h, w);
    let thin = non_maximum_suppression(&mag, &dir, h, w);
    Ok(hysteresis(&thin, h, w, thre1, thre2))
}

fn clamp_fetch(data: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    let rr = r.clamp(0, h as isize - 1) as usize;
    let cc = c.clamp(0, w as isize - 1) as usize;
    data[rr * w + cc]
}

fn gaussian_blur_5x5(px: &[f64], h: usize, w: usize) -> Vec<f64> {
    // Sampled Gaussian, sigma = 1.0, normalized by its sum (row-major).
    let mut kernel = [[0.0f64; 5]; 5];
    let mut total = 0.0;
    for (di, row) in kernel.iter_mut().enumerate() {
        for (dj, v) in row.iter_mut().enumerate() {
            let dy = di as f64 - 2.0;
            let dx = dj as f64 - 2.0;
            *v = (-(dy * dy + dx * dx) / 2.0).exp();
            total += *v;
        }
    }
    for row in kernel.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (di, row) in kernel.iter().enumerate() {
                for (dj, &kv) in row.iter().enumerate() {
                    acc += kv
                        * clamp_fetch(px, h, w, r as isize + di as isize - 2, c as isize + dj as isize - 2);
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn sobel(px: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            let at = |dr: isize, dc: isize| clamp_fetch(px, h, w, ri + dr, ci + dc);
            let gx = -at(-1, -1) + at(-1, 1) - 2.0 * at(0, -1) + 2.0 * at(0, 1) - at(1, -1) + at(1, 1);
            let gy = -at(-1, -1) - 2.0 * at(-1, 0) - at(-1, 1) + at(1, -1) + 2.0 * at(1, 0) + at(1, 1);
            mag[r * w + c] = (gx * gx + gy * gy).sqrt();
            dir[r * w + c] = gy.atan2(gx);
        }
    }
    (mag, dir)
}

fn non_maximum_suppression(mag: &[f64], dir: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    if h < 3 || w < 3 {
        return out;
    }
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let mut angle = dir[r * w + c].to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // Quantize to 4 bins; compare against the two neighbors along
            // the gradient direction, ties kept.
            let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                (r * w + (c - 1), r * w + (c + 1))
            } else if angle < 67.5 {
                ((r + 1) * w + (c + 1), (r - 1) * w + (c - 1))
            } else if angle < 112.5 {
                ((r - 1) * w + c, (r + 1) * w + c)
            } else {
                ((r + 1) * w + (c - 1), (r - 1) * w + (c + 1))
            };
            let m = mag[r * w + c];
            if m >= mag[n1] && m >= mag[n2] {
                out[r * w + c] = m;
            }
        }
    }
    out
}

fn hysteresis(thin: &[f64], h: usize, w: usize, thre1: f64, thre2: f64) -> EdgeMap {
    let strong = |m: f64| m > 0.0 && m >= thre2;
    let weak = |m: f64| m > 0.0 && m >= thre1;
    let mut mask = vec![false; h * w];
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !strong(thin[r * w + c]) || mask[r * w + c] {
                continue;
            }
            mask[r * w + c] = true;
            frontier.push((r, c));
            while let Some((cr, cc)) = frontier.pop() {
                let r_lo = cr.saturating_sub(1);
                let c_lo = cc.saturating_sub(1);
                for nr in r_lo..=(cr + 1).min(h - 1) {
                    for nc in c_lo..=(cc + 1).min(w - 1) {
                        if (nr, nc) == (cr, cc) || mask[nr * w + nc] {
                            continue;
                        }
                        if weak(thin[nr * w + nc]) {
                            mask[nr * w + nc] = true;
                            frontier.push((nr, nc));
                        }
                    }
                }
            }
        }
    }
    EdgeMap::from_mask(h, w, mask)
}
