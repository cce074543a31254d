//! Equivalence of `imaging::canny` with the independently written reference
//! pipeline, pixel-exact on random and structured images.

use glab_core::imaging::{canny, GrayImage};
use glab_core::rng::Rng;
use glab_core::testkit::reference_canny;

fn assert_same(img: &GrayImage, thre1: f64, thre2: f64, what: &str) {
    let ours = canny(img, thre1, thre2).unwrap();
    let reference = reference_canny(img, thre1, thre2);
    assert_eq!(ours.mask(), reference.mask(), "canny mismatch on {what}");
}

fn smooth(px: &mut Vec<f64>, h: usize, w: usize) {
    let orig = px.clone();
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let nr = r as i64 + dr;
                    let nc = c as i64 + dc;
                    if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                        acc += orig[nr as usize * w + nc as usize];
                        cnt += 1.0;
                    }
                }
            }
            px[r * w + c] = acc / cnt;
        }
    }
}

#[test]
fn matches_reference_on_50_random_images() {
    let thresholds = [(0.05, 0.1), (0.1, 0.2), (0.3, 0.5), (0.2, 0.2)];
    for seed in 0..50u64 {
        let mut rng = Rng::new(9000 + seed);
        let (h, w) = (32, 32);
        let mut px: Vec<f64> = (0..h * w).map(|_| rng.next_f64()).collect();
        if seed % 2 == 1 {
            // Smoother images exercise the NMS bins differently than noise.
            smooth(&mut px, h, w);
        }
        let img = GrayImage::new(h, w, px).unwrap();
        let (t1, t2) = thresholds[(seed % 4) as usize];
        assert_same(&img, t1, t2, &format!("random image seed {seed}"));
    }
}

#[test]
fn matches_reference_on_step_and_constant() {
    let (h, w) = (32, 32);
    let mut step = vec![0.0; h * w];
    for r in 0..h {
        for c in w / 2..w {
            step[r * w + c] = 1.0;
        }
    }
    let img = GrayImage::new(h, w, step).unwrap();
    assert_same(&img, 0.1, 0.2, "vertical step");

    let flat = GrayImage::new(h, w, vec![0.42; h * w]).unwrap();
    let ours = canny(&flat, 0.1, 0.2).unwrap();
    assert_eq!(ours.edge_count(), 0);
    assert_same(&flat, 0.1, 0.2, "constant image");

    // Horizontal step too, to cover the 90-degree bin.
    let mut hstep = vec![0.0; h * w];
    for r in h / 2..h {
        for c in 0..w {
            hstep[r * w + c] = 0.8;
        }
    }
    let img2 = GrayImage::new(h, w, hstep).unwrap();
    assert_same(&img2, 0.05, 0.15, "horizontal step");
}

#[test]
fn matches_reference_on_odd_sizes_and_diagonals() {
    for (h, w, seed) in [(17usize, 23usize, 1u64), (11, 11, 2), (16, 48, 3)] {
        let mut rng = Rng::new(7700 + seed);
        let mut px: Vec<f64> = (0..h * w).map(|_| rng.next_f64()).collect();
        // Add a bright diagonal band for 45/135-degree NMS bins.
        for r in 0..h {
            for c in 0..w {
                if (r as i64 - c as i64).abs() <= 1 {
                    px[r * w + c] = 1.0;
                }
            }
        }
        let img = GrayImage::new(h, w, px).unwrap();
        assert_same(&img, 0.15, 0.3, &format!("diagonal {h}x{w}"));
    }
}
