//! Independent oracles used by the test suites.
//!
//! Nothing here is called by the library itself: the finite-difference
//! machinery and the reference Canny pipeline exist so tests can check the
//! real implementations against independently written code. Enabled through
//! the `testkit` feature by test targets only.

use crate::error::Result;
use crate::imaging::{EdgeMap, GrayImage};
use crate::tensor::{Tape, Tensor, Val};

/// Step size shared by all finite-difference checks.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so near-zero gradients are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Central finite differences of `f` at `x`, one entry per element of `x`.
///
/// `f` must be a pure function of its argument. Each call builds a fresh
/// tape, so this is deliberately independent of `grads_graph`.
pub fn finite_difference<F>(x: &Tensor, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grads.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(grads)
}

/// Evaluate a scalar-valued tape program on a single input tensor.
pub fn eval_scalar<F>(x: &Tensor, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Val) -> Result<Val>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x)?;
    let out = build(&mut tape, v)?;
    Ok(tape.item(out))
}

/// Analytic gradient of a scalar-valued tape program w.r.t. its input.
pub fn analytic_grad<F>(x: &Tensor, build: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, Val) -> Result<Val>,
{
    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    let v = tape.leaf(&leaf)?;
    let out = build(&mut tape, v)?;
    tape.backward(out)?;
    Ok(tape.grad(v).unwrap().data().to_vec())
}

// ── Reference Canny pipeline ───────────────────────────────────────────
//
// Same five stages as `imaging::canny`, written separately: whole-image
// buffers, if-chains for the direction bins, and an explicit DFS stack for
// hysteresis. Tap accumulation is row-major in both implementations; that
// ordering is part of the pipeline definition, so value-for-value agreement
// is meaningful.

/// Reference implementation used as the equivalence oracle for canny.
pub fn reference_canny(img: &GrayImage, thre1: f64, thre2: f64) -> EdgeMap {
    assert!(thre1 <= thre2, "thresholds must be ordered");
    let h = img.height();
    let w = img.width();
    let px = img.pixels();

    // 5x5 Gaussian, sigma = 1.0, normalized, clamp-to-edge borders.
    let mut kernel = [[0.0f64; 5]; 5];
    let mut ksum = 0.0;
    for (di, row) in kernel.iter_mut().enumerate() {
        for (dj, v) in row.iter_mut().enumerate() {
            let dy = di as f64 - 2.0;
            let dx = dj as f64 - 2.0;
            *v = (-(dy * dy + dx * dx) / 2.0).exp();
            ksum += *v;
        }
    }
    for row in kernel.iter_mut() {
        for v in row.iter_mut() {
            *v /= ksum;
        }
    }
    let clamp_at = |r: isize, c: isize| -> f64 {
        let rr = r.clamp(0, h as isize - 1) as usize;
        let cc = c.clamp(0, w as isize - 1) as usize;
        px[rr * w + cc]
    };
    let mut blurred = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (di, row) in kernel.iter().enumerate() {
                for (dj, &kv) in row.iter().enumerate() {
                    acc += kv * clamp_at(r as isize + di as isize - 2, c as isize + dj as isize - 2);
                }
            }
            blurred[r * w + c] = acc;
        }
    }

    // Sobel with clamp-to-edge borders; gx along columns, gy along rows.
    let blur_at = |r: isize, c: isize| -> f64 {
        let rr = r.clamp(0, h as isize - 1) as usize;
        let cc = c.clamp(0, w as isize - 1) as usize;
        blurred[rr * w + cc]
    };
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            let gx = -blur_at(ri - 1, ci - 1) + blur_at(ri - 1, ci + 1)
                - 2.0 * blur_at(ri, ci - 1)
                + 2.0 * blur_at(ri, ci + 1)
                - blur_at(ri + 1, ci - 1)
                + blur_at(ri + 1, ci + 1);
            let gy = -blur_at(ri - 1, ci - 1) - 2.0 * blur_at(ri - 1, ci) - blur_at(ri - 1, ci + 1)
                + blur_at(ri + 1, ci - 1)
                + 2.0 * blur_at(ri + 1, ci)
                + blur_at(ri + 1, ci + 1);
            mag[r * w + c] = (gx * gx + gy * gy).sqrt();
            dir[r * w + c] = gy.atan2(gx);
        }
    }

    // Non-maximum suppression, four direction bins, borders suppressed.
    let mut thin = vec![0.0; h * w];
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let mut angle = dir[r * w + c].to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (n1, n2): ((usize, usize), (usize, usize)) = if !(22.5..157.5).contains(&angle) {
                ((r, c - 1), (r, c + 1))
            } else if angle < 67.5 {
                ((r + 1, c + 1), (r - 1, c - 1))
            } else if angle < 112.5 {
                ((r - 1, c), (r + 1, c))
            } else {
                ((r + 1, c - 1), (r - 1, c + 1))
            };
            let m = mag[r * w + c];
            if m >= mag[n1.0 * w + n1.1] && m >= mag[n2.0 * w + n2.1] {
                thin[r * w + c] = m;
            }
        }
    }

    // Double threshold + hysteresis with an explicit DFS stack.
    let strong = |m: f64| m > 0.0 && m >= thre2;
    let weak = |m: f64| m > 0.0 && m >= thre1;
    let mut mask = vec![false; h * w];
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if strong(thin[r * w + c]) && !mask[r * w + c] {
                mask[r * w + c] = true;
                stack.push((r, c));
                while let Some((cr, cc)) = stack.pop() {
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            if dr == 0 && dc == 0 {
                                continue;
                            }
                            let nr = cr as i64 + dr;
                            let nc = cc as i64 + dc;
                            if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                                continue;
                            }
                            let (nr, nc) = (nr as usize, nc as usize);
                            if !mask[nr * w + nc] && weak(thin[nr * w + nc]) {
                                mask[nr * w + nc] = true;
                                stack.push((nr, nc));
                            }
                        }
                    }
                }
            }
        }
    }
    EdgeMap::from_mask(h, w, mask)
}
