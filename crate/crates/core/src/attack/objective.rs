//! Strategy objectives, shared between the attack loop and the term-level
//! breakdown used by tests and reports.
//!
//! DLG:  sum of squared gradient distances.
//! GGI:  1 - cos(grads', grads) + alpha_tv * R_TV.
//! CPL:  squared gradient distance + alpha_cpl * |f(x_hat) - y_hat|^2.
//! MGIC: 1 - cos + alpha_tv * R_TV + alpha_l2 * R_L2 + alpha_ca * R_CA.
//!
//! R_TV here is the anisotropic total variation per pixel (the raw sum
//! divided by the pixel count), so the standard weights keep the same
//! balance against the unit-scale cosine term at any resolution.
//!
//! R_CA compares the baseline point extracted from the capture (CA_g, fixed
//! per attack) with the one extracted from the current reconstruction's
//! Canny edges (CA_t, recomputed every iteration at thresholds 0.8/0.9 of
//! the reconstruction's maximum). The coordinate pipeline is piecewise
//! constant, so R_CA contributes its value to the objective; its positional
//! effect is applied by the nudge in the attack loop.

use crate::error::Result;
use crate::fl::{loss_on_tape, GradientCapture};
use crate::imaging::{baseline_from_edges, canny, to_gray, BaselinePoint};
use crate::model::ModelGraph;
use crate::tensor::{Tape, Tensor, Val};

use super::{AttackConfig, Strategy};

/// Per-term values of one objective evaluation. `total` is the full
/// strategy objective including the alpha-weighted R_CA value.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveBreakdown {
    pub grad_match: f64,
    pub tv: f64,
    pub l2: f64,
    pub ca: f64,
    pub cpl: f64,
    pub total: f64,
}

pub(crate) struct IterEval {
    /// Differentiable objective node (everything except the R_CA value).
    pub node: Val,
    pub breakdown: ObjectiveBreakdown,
    pub ca_t: Option<BaselinePoint>,
    pub edge_fallback: bool,
}

/// R_CA for a reconstruction: Canny at (0.8 max, 0.9 max) on the grayscale
/// view, baseline point from the edges, squared distance to CA_g.
pub(crate) fn r_ca_value(
    xhat: &Tensor,
    ca_g: &BaselinePoint,
) -> Result<(f64, BaselinePoint, bool)> {
    let gray = to_gray(xhat)?;
    let max = gray.max_value();
    let edges = canny(&gray, 0.8 * max, 0.9 * max)?;
    let (ca_t, fallback) = baseline_from_edges(&edges);
    Ok((ca_g.dist_sq(&ca_t), ca_t, fallback))
}

/// Build the strategy objective for the current reconstruction leaf.
/// `param_vals` are the model parameters registered as gradient leaves, in
/// the same entry-name order as the capture's gradients.
pub(crate) fn eval_on_tape(
    tape: &mut Tape,
    x_leaf: Val,
    model: &ModelGraph,
    param_vals_by_layer: &[Vec<Val>],
    flat_param_vals: &[Val],
    capture: &GradientCapture,
    capture_parts: &[&Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
    ca_g: Option<&BaselinePoint>,
    current_x: &Tensor,
) -> Result<IterEval> {
    let [c, h, w] = model.input_shape;
    let x4 = tape.reshape(x_leaf, &[1, c, h, w])?;
    let logits = model.forward_on_tape(tape, x4, param_vals_by_layer)?;
    let dummy_loss = loss_on_tape(tape, logits, labels, capture.loss_kind)?;
    let grads = tape.grads_graph(dummy_loss, flat_param_vals)?;

    let mut breakdown = ObjectiveBreakdown::default();
    let grad_match = match cfg.strategy {
        Strategy::Dlg | Strategy::Cpl => {
            let mut total: Option<Val> = None;
            for (gv, part) in grads.iter().zip(capture_parts) {
                let flat_len = part.numel();
                let flat = tape.reshape(*gv, &[flat_len])?;
                let target = tape.const_from(&[flat_len], part.data().to_vec())?;
                let diff = tape.sub(flat, target)?;
                let term = tape.sum_sq(diff)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            total.expect("model has parameters")
        }
        Strategy::Ggi | Strategy::Mgic => {
            let flat_grads: Vec<Val> = grads
                .iter()
                .zip(capture_parts)
                .map(|(gv, part)| tape.reshape(*gv, &[part.numel()]))
                .collect::<Result<_>>()?;
            let g_all = tape.concat_flat(&flat_grads)?;
            let cap_flat = capture.flat_concat();
            let cap_val = tape.constant(&cap_flat)?;
            let cos = tape.cosine_similarity(g_all, cap_val)?;
            let one = tape.scalar(1.0)?;
            tape.sub(one, cos)?
        }
    };
    breakdown.grad_match = tape.item(grad_match);
    let mut node = grad_match;

    match cfg.strategy {
        Strategy::Dlg => {}
        Strategy::Cpl => {
            let mut target = vec![0.0; model.class_count];
            for &l in labels {
                target[l] = 1.0;
            }
            let target_val = tape.const_from(&[model.class_count], target)?;
            let diff = tape.sub(logits, target_val)?;
            let cpl = tape.sum_sq(diff)?;
            breakdown.cpl = tape.item(cpl);
            let weighted = tape.scale(cpl, cfg.alpha_cpl)?;
            node = tape.add(node, weighted)?;
        }
        Strategy::Ggi | Strategy::Mgic => {
            let x3 = tape.reshape(x_leaf, &[c, h, w])?;
            let tv_sum = tape.tv_l1(x3)?;
            let tv = tape.scale(tv_sum, 1.0 / (c * h * w) as f64)?;
            breakdown.tv = tape.item(tv);
            let weighted_tv = tape.scale(tv, cfg.alpha_tv)?;
            node = tape.add(node, weighted_tv)?;
            if cfg.strategy == Strategy::Mgic {
                let l2 = tape.sum_sq(x_leaf)?;
                breakdown.l2 = tape.item(l2);
                let weighted_l2 = tape.scale(l2, cfg.alpha_l2)?;
                node = tape.add(node, weighted_l2)?;
            }
        }
    }

    let mut ca_t = None;
    let mut edge_fallback = false;
    if cfg.strategy == Strategy::Mgic && cfg.alpha_ca > 0.0 {
        if let Some(anchor) = ca_g {
            let x3 = current_x.reshaped(&[c, h, w])?;
            let (ca, t, fb) = r_ca_value(&x3, anchor)?;
            breakdown.ca = ca;
            ca_t = Some(t);
            edge_fallback = fb;
        }
    }
    breakdown.total = tape.item(node) + cfg.alpha_ca * breakdown.ca;
    Ok(IterEval { node, breakdown, ca_t, edge_fallback })
}

/// Evaluate the objective terms for a given reconstruction without running
/// the attack loop. Intended for analysis and tests.
pub fn objective_breakdown(
    model: &ModelGraph,
    capture: &GradientCapture,
    xhat: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    ca_g: Option<&BaselinePoint>,
) -> Result<ObjectiveBreakdown> {
    crate::fl::check_capture_matches(model, capture)?;
    let mut tape = Tape::new();
    let mut x = xhat.reshaped(&[xhat.numel()])?;
    x.requires_grad = true;
    let x_leaf = tape.leaf(&x)?;
    let params = model.register_params(&mut tape, true)?;
    let flat: Vec<Val> = model
        .param_index()
        .iter()
        .map(|(_, li, pi)| params[*li][*pi])
        .collect();
    let parts: Vec<&Tensor> = capture.grads().values().collect();
    let labels = crate::fl::normalize_labels(labels, model.class_count)?;
    let eval = eval_on_tape(
        &mut tape, x_leaf, model, &params, &flat, capture, &parts, &labels, cfg, ca_g, xhat,
    )?;
    Ok(eval.breakdown)
}
