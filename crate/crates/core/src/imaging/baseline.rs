//! Baseline-point extraction.
//!
//! One anchor pixel per image: from the captured gradients once per attack
//! (the selection threshold is 0.6 of the gradient value range), and from the
//! current reconstruction's Canny edges every iteration. Degenerate
//! selections fall back to the image center and raise a flag.

use super::EdgeMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A pixel coordinate in image space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselinePoint {
    pub row: usize,
    pub col: usize,
}

impl BaselinePoint {
    /// Squared Euclidean distance to another point.
    pub fn dist_sq(&self, other: &BaselinePoint) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        dr * dr + dc * dc
    }

    pub fn dist(&self, other: &BaselinePoint) -> f64 {
        self.dist_sq(other).sqrt()
    }
}

/// The 2-D view used to index a gradient tensor as a matrix: rank 1 becomes a
/// single row, rank 2 is taken as-is, higher ranks flatten the leading axes
/// into rows and the trailing two (spatial) axes into columns.
pub fn two_d_view(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 => Err(Error::Contract("cannot view a scalar as a matrix".into())),
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        n => {
            let cols = shape[n - 2] * shape[n - 1];
            let rows: usize = shape[..n - 2].iter().product();
            Ok((rows, cols))
        }
    }
}

/// Select the anchor point from a gradient tensor and scale its matrix
/// coordinate into image space. Returns the point plus a flag that is true
/// when the selection was empty and the image center was used instead.
pub fn baseline_from_gradients(
    bpg: &Tensor,
    img_h: usize,
    img_w: usize,
) -> Result<(BaselinePoint, bool)> {
    if bpg.numel() == 0 {
        return Err(Error::Contract("baseline_from_gradients on empty tensor".into()));
    }
    let (rows, cols) = two_d_view(bpg.shape())?;
    let data = bpg.data();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in data {
        min = min.min(v);
        max = max.max(v);
    }
    // Threshold anchored to the value range: entries above min + 0.6*(max-min).
    let fin = (max - min) * 0.6;
    let cutoff = min + fin;
    let mut selected: Vec<(usize, usize)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if data[r * cols + c] > cutoff {
                selected.push((r, c));
            }
        }
    }
    let n = selected.len();
    if n == 0 {
        return Ok((BaselinePoint { row: img_h / 2, col: img_w / 2 }, true));
    }
    let row = selected[n / 2].0;
    let col = selected[2 * n / 3].1;
    Ok((
        BaselinePoint { row: row * img_h / rows, col: col * img_w / cols },
        false,
    ))
}

/// Pick the middle-position edge pixel: row from the n/2-th edge, column from
/// the 2n/3-th. An empty map falls back to the image center with a flag.
pub fn baseline_from_edges(edges: &EdgeMap) -> (BaselinePoint, bool) {
    let pixels = edges.edge_pixels();
    let m = pixels.len();
    if m == 0 {
        return (
            BaselinePoint { row: edges.height() / 2, col: edges.width() / 2 },
            true,
        );
    }
    (
        BaselinePoint { row: pixels[m / 2].0, col: pixels[2 * m / 3].1 },
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_scaling_example() {
        // Matrix coordinate (3,5) of a 7x7 gradient on a 224x224 image
        // lands on (96, 160).
        assert_eq!(3 * 224 / 7, 96);
        assert_eq!(5 * 224 / 7, 160);
        // Same path through the real function: a 7x7 matrix whose selection
        // is exactly {(3,5)} (both indices 0 with n = 1).
        let mut data = vec![0.0; 49];
        data[3 * 7 + 5] = 1.0;
        let t = Tensor::new(&[7, 7], data).unwrap();
        let (p, fallback) = baseline_from_gradients(&t, 224, 224).unwrap();
        assert!(!fallback);
        assert_eq!(p, BaselinePoint { row: 96, col: 160 });
    }

    #[test]
    fn constant_gradient_falls_back_to_center() {
        let t = Tensor::full(&[4, 4], 0.3);
        let (p, fallback) = baseline_from_gradients(&t, 32, 32).unwrap();
        assert!(fallback);
        assert_eq!(p, BaselinePoint { row: 16, col: 16 });
    }

    #[test]
    fn hand_enumerated_selection_rule() {
        // Exactly four above-threshold entries at row-major coordinates
        // (0,1), (1,2), (2,0), (3,3): n = 4, row from L[2] = (2,0), column
        // from L[2] = (2,0) as well -> point (2,0) before scaling.
        let mut data = vec![0.0; 16];
        for (r, c) in [(0, 1), (1, 2), (2, 0), (3, 3)] {
            data[r * 4 + c] = 1.0;
        }
        let t = Tensor::new(&[4, 4], data).unwrap();
        // Image dims equal to matrix dims: scaling is the identity.
        let (p, fallback) = baseline_from_gradients(&t, 4, 4).unwrap();
        assert!(!fallback);
        assert_eq!(p, BaselinePoint { row: 2, col: 0 });
    }

    #[test]
    fn single_edge_pixel_is_its_own_baseline() {
        let mut mask = vec![false; 12 * 12];
        mask[5 * 12 + 7] = true;
        let edges = EdgeMap::from_mask(12, 12, mask);
        let (p, fallback) = baseline_from_edges(&edges);
        assert!(!fallback);
        assert_eq!(p, BaselinePoint { row: 5, col: 7 });
    }

    #[test]
    fn empty_edge_map_falls_back_to_center() {
        let edges = EdgeMap::from_mask(9, 9, vec![false; 81]);
        let (p, fallback) = baseline_from_edges(&edges);
        assert!(fallback);
        assert_eq!(p, BaselinePoint { row: 4, col: 4 });
    }

    #[test]
    fn border_ring_hand_enumeration() {
        // Full border of an 8x8 image: 28 edge pixels row-major. E[14] is
        // (4,0) and E[18] is (6,0), so the point is (4, 0).
        let mut mask = vec![false; 64];
        for i in 0..8 {
            mask[i] = true; // row 0
            mask[7 * 8 + i] = true; // row 7
            mask[i * 8] = true; // col 0
            mask[i * 8 + 7] = true; // col 7
        }
        let edges = EdgeMap::from_mask(8, 8, mask);
        let pixels = edges.edge_pixels();
        assert_eq!(pixels.len(), 28);
        assert_eq!(pixels[14], (4, 0));
        assert_eq!(pixels[18], (6, 0));
        let (p, fallback) = baseline_from_edges(&edges);
        assert!(!fallback);
        assert_eq!(p, BaselinePoint { row: 4, col: 0 });
    }

    #[test]
    fn outputs_always_satisfy_the_coordinate_bounds() {
        let mut rng = crate::rng::Rng::new(31);
        for trial in 0..50 {
            let rows = 1 + rng.below(12);
            let cols = 1 + rng.below(40);
            let n = rows * cols;
            let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let t = Tensor::new(&[rows, cols], data).unwrap();
            let (img_h, img_w) = (8 + rng.below(56), 8 + rng.below(56));
            let (p, _) = baseline_from_gradients(&t, img_h, img_w).unwrap();
            assert!(p.row < img_h && p.col < img_w, "trial {trial}: {p:?} out of {img_h}x{img_w}");

            let mask: Vec<bool> = (0..img_h * img_w).map(|_| rng.below(10) == 0).collect();
            let edges = EdgeMap::from_mask(img_h, img_w, mask);
            let (q, _) = baseline_from_edges(&edges);
            assert!(q.row < img_h && q.col < img_w);
        }
    }

    #[test]
    fn selection_is_invariant_under_positive_affine_rescaling() {
        let mut rng = crate::rng::Rng::new(5);
        let data: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let t = Tensor::new(&[8, 8], data.clone()).unwrap();
        let shifted =
            Tensor::new(&[8, 8], data.iter().map(|v| 3.0 * v + 11.0).collect()).unwrap();
        let a = baseline_from_gradients(&t, 32, 32).unwrap();
        let b = baseline_from_gradients(&shifted, 32, 32).unwrap();
        assert_eq!(a, b);
    }
}
