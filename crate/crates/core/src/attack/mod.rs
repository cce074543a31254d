//! The attack engine: label inference from gradients, the DLG/GGI/CPL/MGIC
//! objectives with their regularizers, and the Adam-driven reconstruction
//! loop with restarts.
//!
//! Nothing in this module ever sees ground-truth pixels or labels; its inputs
//! are a model, an optional NCB, a gradient capture and a configuration.

mod label;
mod objective;
mod run;

pub use label::{forced_single_label, infer_multi_label, infer_single_label, select_labels};
pub use objective::{objective_breakdown, ObjectiveBreakdown};
pub use run::{run_attack, run_attack_with_init};

use crate::imaging::BaselinePoint;
use crate::tensor::Tensor;

/// Reconstruction strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Dlg,
    Ggi,
    Cpl,
    Mgic,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Strategy> {
        match s.to_ascii_uppercase().as_str() {
            "DLG" => Some(Strategy::Dlg),
            "GGI" => Some(Strategy::Ggi),
            "CPL" => Some(Strategy::Cpl),
            "MGIC" => Some(Strategy::Mgic),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Dlg => "DLG",
            Strategy::Ggi => "GGI",
            Strategy::Cpl => "CPL",
            Strategy::Mgic => "MGIC",
        }
    }
}

/// Attack settings. Defaults follow the lab's standard protocol: Adam at
/// lr 0.01, alpha_tv 1e-1, alpha_l2 1e-5, alpha_ca 1e-6, NCB input scale
/// 7e8, label threshold factor 0.99, 20k iterations, one restart.
#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub strategy: Strategy,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_ca: f64,
    pub alpha_cpl: f64,
    pub lr: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
    pub max_labels: usize,
    pub label_threshold_factor: f64,
    pub ncb_scale: f64,
    pub clamp_pixels: bool,
    /// When false, r_ca stays a pure objective value (no positional nudge).
    pub ca_nudge: bool,
    /// When true, MGIC runs one restart set per hypothesized label instead
    /// of optimizing the joint label set.
    pub per_label_restarts: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            strategy: Strategy::Mgic,
            alpha_tv: 1e-1,
            alpha_l2: 1e-5,
            alpha_ca: 1e-6,
            alpha_cpl: 1e-2,
            lr: 0.01,
            max_iterations: 20_000,
            restarts: 1,
            seed: 0,
            max_labels: 2,
            label_threshold_factor: 0.99,
            ncb_scale: 7e8,
            clamp_pixels: true,
            ca_nudge: true,
            per_label_restarts: false,
        }
    }
}

/// How a label hypothesis was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMethod {
    CrossEntropySign,
    Ncb,
}

/// Hypothesized label set with per-label scores.
#[derive(Clone, Debug)]
pub struct LabelHypothesis {
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    pub method: LabelMethod,
}

/// Degenerate-selection flags raised during baseline extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BaselineFlags {
    /// The gradient selection was empty; CA_g fell back to the image center.
    pub gradient_fallback: bool,
    /// Some iteration produced an empty edge map; CA_t used the center.
    pub edge_fallback: bool,
}

/// Everything an attack run reports. `psnr`/`ssim` stay empty until the
/// evaluation stage joins the reconstruction with ground truth.
#[derive(Clone, Debug)]
pub struct AttackReport {
    pub reconstruction: Tensor,
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub restart_index: usize,
    pub baseline_flags: BaselineFlags,
    pub nudge_count: u64,
    pub final_r_ca: f64,
    pub ca_g: Option<BaselinePoint>,
    pub hypothesis: LabelHypothesis,
    pub failed_restarts: Vec<usize>,
    pub wall_time: f64,
}
