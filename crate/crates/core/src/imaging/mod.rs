//! Classical image processing: Canny edges, baseline-point extraction,
//! similarity metrics, grayscale conversion and portable image I/O.

mod baseline;
mod canny;
mod io;
mod metrics;

pub use baseline::{baseline_from_edges, baseline_from_gradients, two_d_view, BaselinePoint};
pub use canny::canny;
pub use io::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use metrics::{psnr, ssim, total_variation};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale image with pixels in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Values are clamped into [0, 1]; non-finite input is an error.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension {
                op: "GrayImage::new",
                detail: format!("dimensions must be positive, got {height}x{width}"),
            });
        }
        if pixels.len() != height * width {
            return Err(Error::Dimension {
                op: "GrayImage::new",
                detail: format!("{height}x{width} needs {} pixels, got {}", height * width, pixels.len()),
            });
        }
        for v in &mut pixels {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite pixel value {v}")));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn max_value(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.pixels.clone()).expect("pixels are finite")
    }
}

/// Binary edge mask with the same dimensions as its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl EdgeMap {
    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Self {
        debug_assert_eq!(mask.len(), height * width);
        EdgeMap { height, width, mask }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_edge(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn edge_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Edge pixel coordinates in row-major order.
    pub fn edge_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.mask[r * self.width + c] {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// [C,H,W] tensor to grayscale: C=1 clamps through, C=3 applies the
/// 0.299/0.587/0.114 luminance weights.
pub fn to_gray(t: &Tensor) -> Result<GrayImage> {
    let sh = t.shape();
    if sh.len() != 3 {
        return Err(Error::Contract(format!("to_gray expects [C,H,W], got {sh:?}")));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    match c {
        1 => GrayImage::new(h, w, t.data().to_vec()),
        3 => {
            let plane = h * w;
            let d = t.data();
            let mut px = Vec::with_capacity(plane);
            for i in 0..plane {
                px.push(0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]);
            }
            GrayImage::new(h, w, px)
        }
        _ => Err(Error::Contract(format!("to_gray supports 1 or 3 channels, got {c}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_passthrough_keeps_values() {
        let t = Tensor::full(&[1, 4, 4], 0.25);
        let g = to_gray(&t).unwrap();
        assert!(g.pixels().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn rgb_white_maps_to_unit_luminance() {
        let t = Tensor::full(&[3, 2, 2], 1.0);
        let g = to_gray(&t).unwrap();
        for &v in g.pixels() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unsupported_channel_count_is_rejected() {
        let t = Tensor::zeros(&[2, 4, 4]);
        assert!(to_gray(&t).is_err());
    }

    #[test]
    fn construction_clamps_into_unit_range() {
        let g = GrayImage::new(1, 3, vec![-0.5, 0.25, 7.0]).unwrap();
        assert_eq!(g.pixels(), &[0.0, 0.25, 1.0]);
    }
}
