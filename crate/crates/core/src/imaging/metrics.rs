//! Image similarity metrics: PSNR, SSIM and (non-differentiable) total
//! variation. The differentiable total variation lives on the tape
//! (`Tape::tv_l1`); the value computed here matches it exactly.

use super::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_dims(op: &'static str, a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Dimension {
            op,
            detail: format!(
                "{}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak = 1.0. Identical images give
/// the +infinity sentinel.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check_dims("psnr", a, b)?;
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1.0. Windows are evaluated where they fit
/// entirely inside the image; images smaller than the window fall back to a
/// single uniform-weight window over all pixels.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check_dims("ssim", a, b)?;
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let h = a.height();
    let w = a.width();

    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = (h * w) as f64;
        let weights = vec![1.0 / n; h * w];
        return Ok(windowed_ssim(a.pixels(), b.pixels(), &weights, c1, c2));
    }

    let mut kernel = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut total = 0.0;
    let half = (SSIM_WINDOW / 2) as f64;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            let v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kernel[i * SSIM_WINDOW + j] = v;
            total += v;
        }
    }
    for v in &mut kernel {
        *v /= total;
    }

    let mut acc = 0.0;
    let mut count = 0usize;
    let mut wa = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut wb = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            for i in 0..SSIM_WINDOW {
                let row = (top + i) * w + left;
                wa[i * SSIM_WINDOW..(i + 1) * SSIM_WINDOW]
                    .copy_from_slice(&a.pixels()[row..row + SSIM_WINDOW]);
                wb[i * SSIM_WINDOW..(i + 1) * SSIM_WINDOW]
                    .copy_from_slice(&b.pixels()[row..row + SSIM_WINDOW]);
            }
            acc += windowed_ssim(&wa, &wb, &kernel, c1, c2);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

fn windowed_ssim(a: &[f64], b: &[f64], weights: &[f64], c1: f64, c2: f64) -> f64 {
    let mut mu_a = 0.0;
    let mut mu_b = 0.0;
    for ((&x, &y), &wt) in a.iter().zip(b).zip(weights) {
        mu_a += wt * x;
        mu_b += wt * y;
    }
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for ((&x, &y), &wt) in a.iter().zip(b).zip(weights) {
        var_a += wt * (x - mu_a) * (x - mu_a);
        var_b += wt * (y - mu_b) * (y - mu_b);
        cov += wt * (x - mu_a) * (y - mu_b);
    }
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Anisotropic L1 total variation of a [H,W] or [C,H,W] tensor.
pub fn total_variation(t: &Tensor) -> Result<f64> {
    let sh = t.shape();
    let (c, h, w) = match sh.len() {
        2 => (1, sh[0], sh[1]),
        3 => (sh[0], sh[1], sh[2]),
        _ => {
            return Err(Error::Dimension {
                op: "total_variation",
                detail: format!("expected rank 2 or 3, got {sh:?}"),
            })
        }
    };
    let data = t.data();
    let mut total = 0.0;
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let cur = base + i * w + j;
                if i + 1 < h {
                    total += (data[base + (i + 1) * w + j] - data[cur]).abs();
                }
                if j + 1 < w {
                    total += (data[cur + 1] - data[cur]).abs();
                }
            }
        }
    }
    Ok(total)
}
