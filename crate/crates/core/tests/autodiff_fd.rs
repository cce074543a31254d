//! Finite-difference checks for every tape primitive.
//!
//! The oracle (`testkit::finite_difference`) recomputes each scalar program
//! at perturbed inputs and central-differences it; the analytic gradients
//! come from the tape. Inputs are kept away from relu/abs kinks so the
//! difference window never crosses a non-smooth point.

use glab_core::rng::Rng;
use glab_core::tensor::{Tape, Tensor, Val};
use glab_core::testkit::{analytic_grad, eval_scalar, finite_difference, rel_err};
use glab_core::{grad_of_grads, Result};

const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Random tensor with entries pushed at least 0.2 away from zero.
fn random_off_kink(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.normal();
            v + 0.2 * if v >= 0.0 { 1.0 } else { -1.0 }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn assert_grad_matches<F>(x: &Tensor, tol: f64, what: &str, build: F)
where
    F: Fn(&mut Tape, Val) -> Result<Val>,
{
    let analytic = analytic_grad(x, &build).unwrap();
    let numeric = finite_difference(x, |probe| eval_scalar(probe, &build)).unwrap();
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(*a, *n);
        assert!(e < tol, "{what}: element {i}: analytic {a} vs fd {n} (rel err {e:.3e})");
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    // Spec-level case: random 1x2x5x5 input, 3x2x3x3 kernel, d(sum y)/d(.)
    let mut rng = Rng::new(100);
    let input = random_tensor(&mut rng, &[1, 2, 5, 5]);
    let kernel = random_tensor(&mut rng, &[3, 2, 3, 3]);

    let k2 = kernel.clone();
    assert_grad_matches(&input, 1e-6, "conv2d wrt input", move |t, x| {
        let k = t.constant(&k2)?;
        let y = t.conv2d(x, k, 1, 0)?;
        t.sum(y)
    });

    let i2 = input.clone();
    assert_grad_matches(&kernel, 1e-6, "conv2d wrt kernel", move |t, k| {
        let x = t.constant(&i2)?;
        let y = t.conv2d(x, k, 1, 0)?;
        t.sum(y)
    });
}

#[test]
fn strided_padded_conv_gradients_match() {
    let mut rng = Rng::new(101);
    let input = random_tensor(&mut rng, &[1, 3, 6, 6]);
    let kernel = random_tensor(&mut rng, &[2, 3, 4, 4]);
    let k2 = kernel.clone();
    // (6 + 2 - 4) / 2 + 1 = 3
    assert_grad_matches(&input, TOL, "strided conv wrt input", move |t, x| {
        let k = t.constant(&k2)?;
        let y = t.conv2d(x, k, 2, 1)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    let i2 = input.clone();
    assert_grad_matches(&kernel, TOL, "strided conv wrt kernel", move |t, k| {
        let x = t.constant(&i2)?;
        let y = t.conv2d(x, k, 2, 1)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
}

#[test]
fn cross_entropy_gradient_matches_closely() {
    let mut rng = Rng::new(102);
    let logits = random_tensor(&mut rng, &[10]);
    assert_grad_matches(&logits, 1e-6, "cross_entropy", |t, x| t.cross_entropy(x, 3));
}

#[test]
fn primitive_sweep_100_seeded_cases() {
    // 100 seeded cases cycling through the primitive set on random shapes.
    for seed in 0..100u64 {
        let mut rng = Rng::new(1000 + seed);
        let h = 2 + (seed % 3) as usize;
        let w = 2 + (seed % 4) as usize;
        match seed % 10 {
            0 => {
                let x = random_off_kink(&mut rng, &[h * w]);
                assert_grad_matches(&x, TOL, "relu&mul", |t, v| {
                    let r = t.relu(v)?;
                    let m = t.mul(r, v)?;
                    t.sum(m)
                });
            }
            1 => {
                let x = random_tensor(&mut rng, &[h, w]);
                let other = random_tensor(&mut rng, &[h, w]);
                assert_grad_matches(&x, TOL, "elementwise chain", move |t, v| {
                    let o = t.constant(&other)?;
                    let s = t.sub(v, o)?;
                    let e = t.exp(s)?;
                    let sig = t.sigmoid(e)?;
                    t.sum(sig)
                });
            }
            2 => {
                let x = random_tensor(&mut rng, &[1, 1, 2 * h, 2 * w]);
                assert_grad_matches(&x, TOL, "avgpool", |t, v| {
                    let p = t.avgpool2d(v, 2)?;
                    let sq = t.mul(p, p)?;
                    t.sum(sq)
                });
            }
            3 => {
                let x = random_tensor(&mut rng, &[h, w]);
                let wmat = random_tensor(&mut rng, &[3, w]);
                assert_grad_matches(&x, TOL, "matmul_nt", move |t, v| {
                    let m = t.constant(&wmat)?;
                    let y = t.matmul_nt(v, m)?;
                    let sq = t.mul(y, y)?;
                    t.sum(sq)
                });
            }
            4 => {
                let x = random_tensor(&mut rng, &[w]);
                let gamma = random_off_kink(&mut rng, &[w]);
                let beta = random_tensor(&mut rng, &[w]);
                let mean = random_tensor(&mut rng, &[w]);
                let mut var = random_tensor(&mut rng, &[w]);
                for v in var.data_mut() {
                    *v = v.abs() + 0.5;
                }
                assert_grad_matches(&x, TOL, "batchnorm wrt x", move |t, v| {
                    let m = t.constant(&mean)?;
                    let va = t.constant(&var)?;
                    let g = t.constant(&gamma)?;
                    let b = t.constant(&beta)?;
                    let y = t.batchnorm_inference(v, m, va, g, b, 1e-5)?;
                    let sq = t.mul(y, y)?;
                    t.sum(sq)
                });
            }
            5 => {
                let x = random_tensor(&mut rng, &[h * w]);
                let labels: Vec<usize> = vec![0, (h * w) / 2];
                assert_grad_matches(&x, TOL, "multi_hot_bce", move |t, v| {
                    t.multi_hot_bce(v, &labels)
                });
            }
            6 => {
                let x = random_tensor(&mut rng, &[h + 3]);
                let other = random_off_kink(&mut rng, &[h + 3]);
                assert_grad_matches(&x, TOL, "cosine", move |t, v| {
                    let o = t.constant(&other)?;
                    t.cosine_similarity(v, o)
                });
            }
            7 => {
                // TV away from zero differences.
                let n = h * w;
                let data: Vec<f64> = (0..n)
                    .map(|i| i as f64 * 0.13 + rng.next_f64() * 0.01)
                    .collect();
                let x = Tensor::new(&[h, w], data).unwrap();
                assert_grad_matches(&x, TOL, "tv_l1", |t, v| t.tv_l1(v));
            }
            8 => {
                let x = random_off_kink(&mut rng, &[h, w]);
                assert_grad_matches(&x, TOL, "abs/sqrt chain", |t, v| {
                    let a = t.abs(v)?;
                    let s = t.sqrt(a)?;
                    t.sum(s)
                });
            }
            _ => {
                let x = random_tensor(&mut rng, &[h, w]);
                assert_grad_matches(&x, TOL, "reshape/mean_rows", move |t, v| {
                    let r = t.reshape(v, &[w, h])?;
                    let m = t.mean_rows(r)?;
                    let sp = t.softplus(m)?;
                    t.sum(sp)
                });
            }
        }
    }
}

#[test]
fn linear_layer_gradients_match() {
    let mut rng = Rng::new(103);
    let x = random_tensor(&mut rng, &[1, 6]);
    let w = random_tensor(&mut rng, &[4, 6]);
    let b = random_tensor(&mut rng, &[4]);
    let (w2, b2) = (w.clone(), b.clone());
    assert_grad_matches(&x, TOL, "linear wrt x", move |t, v| {
        let wv = t.constant(&w2)?;
        let bv = t.constant(&b2)?;
        let y = t.linear(v, wv, Some(bv))?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    let (x2, b3) = (x.clone(), b.clone());
    assert_grad_matches(&w, TOL, "linear wrt w", move |t, wv| {
        let xv = t.constant(&x2)?;
        let bv = t.constant(&b3)?;
        let y = t.linear(xv, wv, Some(bv))?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
}

#[test]
fn cosine_invariants_hold() {
    let mut rng = Rng::new(104);
    for _ in 0..50 {
        let a = random_off_kink(&mut rng, &[12]);
        let b = random_off_kink(&mut rng, &[12]);
        let mut tape = Tape::new();
        let va = tape.constant(&a).unwrap();
        let vb = tape.constant(&b).unwrap();
        let ab = tape.cosine_similarity(va, vb).unwrap();
        let ba = tape.cosine_similarity(vb, va).unwrap();
        let v = tape.item(ab);
        assert_eq!(v.to_bits(), tape.item(ba).to_bits(), "cosine not symmetric");
        assert!(v.abs() <= 1.0 + 1e-12);

        // Positive rescaling of either argument moves the value < 1e-12.
        let scaled = tape.scale(va, 731.0).unwrap();
        let vs = tape.cosine_similarity(scaled, vb).unwrap();
        assert!((tape.item(vs) - v).abs() < 1e-12);
    }
}

#[test]
fn grad_through_inner_gradients_matches_fd() {
    // objective(x) = |dL/dw|^2 where L = sum(sigmoid(w * x)): the pixel
    // gradient must flow through the inner gradient graph.
    let mut rng = Rng::new(105);
    let w = random_tensor(&mut rng, &[6]);
    let pixels = random_tensor(&mut rng, &[6]);

    let build = |t: &mut Tape, x: Val| -> Result<Val> {
        let mut wl = w.clone();
        wl.requires_grad = true;
        let wv = t.leaf(&wl)?;
        let prod = t.mul(wv, x)?;
        let act = t.sigmoid(prod)?;
        let loss = t.sum(act)?;
        let grads = t.grads_graph(loss, &[wv])?;
        t.sum_sq(grads[0])
    };

    let analytic = grad_of_grads(&pixels, build).unwrap();
    let numeric = finite_difference(&pixels, |probe| {
        let mut tape = Tape::new();
        let x = tape.constant(probe)?;
        let out = build(&mut tape, x)?;
        Ok(tape.item(out))
    })
    .unwrap();
    for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let e = rel_err(*a, *n);
        assert!(e < TOL, "grad-of-grads element {i}: {a} vs {n} (rel err {e:.3e})");
    }
}

#[test]
fn grad_of_grads_linear_model_is_exact() {
    // L = <w, x> so dL/dw = x and |dL/dw|^2 has pixel gradient exactly 2x.
    let pixels = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let g = grad_of_grads(&pixels, |t, x| {
        let w = t.leaf(&Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap().with_grad())?;
        let loss = t.dot(w, x)?;
        let grads = t.grads_graph(loss, &[w])?;
        t.sum_sq(grads[0])
    })
    .unwrap();
    assert_eq!(g.data(), &[1.0, -2.0, 4.0, 0.5]);
}
