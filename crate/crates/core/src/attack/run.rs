//! The reconstruction loop: seeded Gaussian initialization, Adam updates on
//! the pixel vector, optional clamping, the MGIC positional nudge, restarts,
//! and best-restart selection.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::fl::{check_capture_matches, GradientCapture, LossKind};
use crate::imaging::{baseline_from_gradients, BaselinePoint};
use crate::model::{ModelGraph, NcbGraph};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Val};

use super::label::{forced_single_label, head_weight_grad, infer_multi_label, infer_single_label};
use super::objective::{eval_on_tape, r_ca_value};
use super::{AttackConfig, AttackReport, BaselineFlags, LabelHypothesis, Strategy};

/// Gain converting alpha_ca * lr into the per-step blend of the one-pixel
/// window shift toward CA_g. At the default alpha_ca = 1e-6 and lr = 0.01
/// the early-phase blend is 1e-3 per iteration, a slow positional drift the
/// optimizer can absorb; it fades with the lr decay steps.
const CA_NUDGE_GAIN: f64 = 1e5;

struct RestartOutcome {
    reconstruction: Tensor,
    trace: Vec<f64>,
    nudge_count: u64,
    edge_fallback: bool,
    final_r_ca: f64,
}

/// Run the configured attack against one capture.
pub fn run_attack(
    model: &ModelGraph,
    ncb: Option<&NcbGraph>,
    capture: &GradientCapture,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    run_attack_with_init(model, ncb, capture, cfg, None)
}

/// Like [`run_attack`], but initial reconstructions may be injected per run
/// index (diagnostics and stationarity checks).
pub fn run_attack_with_init(
    model: &ModelGraph,
    ncb: Option<&NcbGraph>,
    capture: &GradientCapture,
    cfg: &AttackConfig,
    init: Option<&[Tensor]>,
) -> Result<AttackReport> {
    let started = Instant::now();
    check_capture_matches(model, capture)?;
    validate_config(cfg)?;

    let hypothesis = make_hypothesis(ncb, capture, cfg)?;

    let mut flags = BaselineFlags::default();
    let ca_g = if cfg.strategy == Strategy::Mgic && cfg.alpha_ca > 0.0 {
        let g = head_weight_grad(capture)?;
        let [_, h, w] = model.input_shape;
        let (point, fallback) = baseline_from_gradients(g, h, w)?;
        flags.gradient_fallback = fallback;
        Some(point)
    } else {
        None
    };

    // Joint optimization by default; the per-label mode reruns the restart
    // budget once per hypothesized label and keeps the global best.
    let label_sets: Vec<Vec<usize>> = if cfg.per_label_restarts && hypothesis.labels.len() > 1 {
        hypothesis.labels.iter().map(|&l| vec![l]).collect()
    } else {
        vec![hypothesis.labels.clone()]
    };

    let mut outcomes: Vec<(usize, RestartOutcome)> = Vec::new();
    let mut failed: Vec<usize> = Vec::new();
    let mut run_idx = 0usize;
    for labels in &label_sets {
        for _ in 0..cfg.restarts {
            let seed = cfg.seed.wrapping_add(run_idx as u64);
            let injected = init.and_then(|list| list.get(run_idx));
            match run_single(model, capture, cfg, labels, ca_g.as_ref(), seed, injected) {
                Ok(out) => outcomes.push((run_idx, out)),
                Err(Error::Numeric(_)) | Err(Error::DegenerateInput(_)) => failed.push(run_idx),
                Err(other) => return Err(other),
            }
            run_idx += 1;
        }
    }
    if outcomes.is_empty() {
        return Err(Error::Attack(format!(
            "all {run_idx} restarts failed with numeric/degenerate errors"
        )));
    }

    let mut best = 0usize;
    for i in 1..outcomes.len() {
        let cur = *outcomes[i].1.trace.last().expect("trace nonempty");
        let so_far = *outcomes[best].1.trace.last().expect("trace nonempty");
        if cur < so_far {
            best = i;
        }
    }
    let (restart_index, winner) = outcomes.swap_remove(best);
    flags.edge_fallback = winner.edge_fallback;
    let final_objective = *winner.trace.last().expect("trace nonempty");
    Ok(AttackReport {
        reconstruction: winner.reconstruction,
        objective_trace: winner.trace,
        final_objective,
        psnr: None,
        ssim: None,
        restart_index,
        baseline_flags: flags,
        nudge_count: winner.nudge_count,
        final_r_ca: winner.final_r_ca,
        ca_g,
        hypothesis,
        failed_restarts: failed,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

fn validate_config(cfg: &AttackConfig) -> Result<()> {
    if cfg.restarts == 0 || cfg.max_iterations == 0 {
        return Err(Error::Contract("restarts and max_iterations must be positive".into()));
    }
    if cfg.lr <= 0.0 {
        return Err(Error::Contract("learning rate must be positive".into()));
    }
    if cfg.max_labels == 0 {
        return Err(Error::Contract("max_labels must be positive".into()));
    }
    if !(cfg.label_threshold_factor > 0.0 && cfg.label_threshold_factor <= 1.0) {
        return Err(Error::Contract("label_threshold_factor must lie in (0, 1]".into()));
    }
    if cfg.ncb_scale <= 0.0 {
        return Err(Error::Contract("ncb_scale must be positive".into()));
    }
    Ok(())
}

/// Strategy-appropriate label inference. Single-label strategies use the
/// cross-entropy-sign method (forced to its best single guess on multi-hot
/// captures, where the exact method is inapplicable); MGIC uses the NCB.
fn make_hypothesis(
    ncb: Option<&NcbGraph>,
    capture: &GradientCapture,
    cfg: &AttackConfig,
) -> Result<LabelHypothesis> {
    match cfg.strategy {
        Strategy::Mgic => match ncb {
            Some(block) => infer_multi_label(capture, block, cfg),
            None => match capture.loss_kind {
                LossKind::SingleCe => infer_single_label(capture),
                LossKind::MultiHotBce => Err(Error::Contract(
                    "MGIC on a multi-hot capture requires an NCB".into(),
                )),
            },
        },
        Strategy::Dlg | Strategy::Ggi | Strategy::Cpl => match capture.loss_kind {
            LossKind::SingleCe => infer_single_label(capture),
            LossKind::MultiHotBce => forced_single_label(capture),
        },
    }
}

fn run_single(
    model: &ModelGraph,
    capture: &GradientCapture,
    cfg: &AttackConfig,
    labels: &[usize],
    ca_g: Option<&BaselinePoint>,
    seed: u64,
    init: Option<&Tensor>,
) -> Result<RestartOutcome> {
    let [c, h, w] = model.input_shape;
    let numel = c * h * w;
    let mut x = match init {
        Some(t) => {
            if t.numel() != numel {
                return Err(Error::Dimension {
                    op: "run_attack",
                    detail: format!("injected init has {} elements, need {numel}", t.numel()),
                });
            }
            t.reshaped(&[numel])?
        }
        None => {
            let mut rng = Rng::new(seed);
            Tensor::new(&[numel], (0..numel).map(|_| rng.normal()).collect())?
        }
    };
    if cfg.clamp_pixels {
        x.clamp(0.0, 1.0);
    }

    let capture_parts: Vec<&Tensor> = capture.grads().values().collect();
    let param_order = model.param_index();
    let nudge_radius = (h.min(w) / 8).max(2);

    let mut adam = Adam::new(cfg.lr, numel);
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut nudges = 0u64;
    let mut edge_fallback = false;

    // Step decay at 3/8, 5/8 and 7/8 of the budget; the final iterate is
    // what the report keeps, so the late phase must stop oscillating.
    let decay_points =
        [cfg.max_iterations * 3 / 8, cfg.max_iterations * 5 / 8, cfg.max_iterations * 7 / 8];

    for it in 0..cfg.max_iterations {
        if cfg.max_iterations >= 8 && decay_points.contains(&it) {
            adam.scale_lr(0.1);
        }
        let mut tape = Tape::new();
        let mut leaf_t = x.clone();
        leaf_t.requires_grad = true;
        let x_leaf = tape.leaf(&leaf_t)?;
        let params = model.register_params(&mut tape, true)?;
        let flat: Vec<Val> =
            param_order.iter().map(|(_, li, pi)| params[*li][*pi]).collect();
        let eval = eval_on_tape(
            &mut tape,
            x_leaf,
            model,
            &params,
            &flat,
            capture,
            &capture_parts,
            labels,
            cfg,
            ca_g,
            &x,
        )?;
        trace.push(eval.breakdown.total);
        edge_fallback |= eval.edge_fallback;

        let pixel_grad = tape.grads_graph(eval.node, &[x_leaf])?[0];
        let g = tape.value(pixel_grad).to_vec();
        adam.step(x.data_mut(), &g);
        if cfg.clamp_pixels {
            x.clamp(0.0, 1.0);
        }
        if cfg.ca_nudge && eval.breakdown.ca > 0.0 {
            if let (Some(anchor), Some(ca_t)) = (ca_g, eval.ca_t) {
                let blend = (cfg.alpha_ca * adam.lr() * CA_NUDGE_GAIN).min(1.0);
                if blend > 0.0 {
                    nudge_window(&mut x, c, h, w, &ca_t, anchor, nudge_radius, blend);
                    nudges += 1;
                }
            }
        }
    }

    let reconstruction = x.reshaped(&[c, h, w])?;
    let final_r_ca = match ca_g {
        Some(anchor) => {
            let (r, _, fb) = r_ca_value(&reconstruction, anchor)?;
            edge_fallback |= fb;
            r
        }
        None => 0.0,
    };
    Ok(RestartOutcome {
        reconstruction,
        trace,
        nudge_count: nudges,
        edge_fallback,
        final_r_ca,
    })
}

/// Translate the window around CA_t by one pixel toward CA_g.
fn nudge_window(
    x: &mut Tensor,
    channels: usize,
    h: usize,
    w: usize,
    ca_t: &BaselinePoint,
    ca_g: &BaselinePoint,
    radius: usize,
    blend: f64,
) {
    let dr = (ca_g.row as i64 - ca_t.row as i64).signum();
    let dc = (ca_g.col as i64 - ca_t.col as i64).signum();
    if dr == 0 && dc == 0 {
        return;
    }
    let r_lo = ca_t.row.saturating_sub(radius);
    let r_hi = (ca_t.row + radius).min(h - 1);
    let c_lo = ca_t.col.saturating_sub(radius);
    let c_hi = (ca_t.col + radius).min(w - 1);
    let plane = h * w;
    for ch in 0..channels {
        let base = ch * plane;
        let orig = x.data()[base..base + plane].to_vec();
        let data = x.data_mut();
        for r in r_lo..=r_hi {
            for col in c_lo..=c_hi {
                let tr = r as i64 + dr;
                let tc = col as i64 + dc;
                if tr < 0 || tc < 0 || tr as usize >= h || tc as usize >= w {
                    continue;
                }
                let dst = base + tr as usize * w + tc as usize;
                data[dst] = (1.0 - blend) * orig[tr as usize * w + tc as usize]
                    + blend * orig[r * w + col];
            }
        }
    }
}
