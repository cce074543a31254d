//! The experiment pipeline behind the subcommands:
//! train -> capture -> attack -> eval, plus the multi-strategy bench.
//!
//! Evaluation is the only stage that joins attacker outputs with ground
//! truth; the attack stage consumes nothing but the model, the NCB and the
//! capture files. Every stage writes a manifest (a rerunnable config dump)
//! and all outputs are pure functions of (config, seed).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use glab_core::attack::{run_attack, AttackConfig, AttackReport, Strategy};
use glab_core::error::{Error, Result};
use glab_core::fl::{client_step, load_capture, save_capture, GradientCapture, LossKind};
use glab_core::imaging::{
    baseline_from_gradients, canny, baseline_from_edges, psnr, read_pgm, read_ppm, ssim, to_gray,
    write_pgm, write_ppm, GrayImage,
};
use glab_core::model::{
    build_micro_cnn, build_ncb, load_ncb, load_weights, save_ncb, save_weights, train, NcbGraph,
    NcbMode,
};
use glab_core::rng::Rng;
use glab_core::tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::csvfmt::fmt_f64;
use crate::sprites::{generate_sprites, DatasetMode, SpriteConfig, SpriteDataset};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn model_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("model.mgic")
}

fn ncb_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("ncb.mgic")
}

fn loss_kind(cfg: &ExperimentConfig) -> LossKind {
    match cfg.dataset_mode {
        DatasetMode::SingleLabel => LossKind::SingleCe,
        DatasetMode::MultiLabel => LossKind::MultiHotBce,
    }
}

pub fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let body = format!(
        "# glab manifest: {command}\n# version = {VERSION}\n# config_hash = {:016x}\n{}",
        cfg.hash(),
        cfg.dump()
    );
    fs::write(cfg.output_dir.join(format!("manifest-{command}.txt")), body)?;
    Ok(())
}

/// Generate the training set, train the classifier, then build the NCB
/// (training it on a capture corpus when the resolved mode asks for that).
pub fn run_train(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let dataset = generate_sprites(&cfg.sprite_config(), cfg.dataset_seed)?;
    let mut model = build_micro_cnn(
        (cfg.dataset_channels, cfg.dataset_height, cfg.dataset_width),
        cfg.dataset_class_count,
        cfg.model_seed,
    )?;
    let kind = loss_kind(cfg);
    let trace = train(
        &mut model,
        &dataset.samples(),
        kind,
        cfg.train_epochs,
        cfg.train_lr,
        cfg.train_seed,
    )?;
    save_weights(&model, &model_path(cfg))?;

    let ncb = match cfg.resolved_ncb_mode() {
        NcbMode::CopyWeights => build_ncb(&model, NcbMode::CopyWeights, None, &cfg.ncb_train_config())?,
        NcbMode::TrainOnGradients => {
            let corpus = capture_corpus(cfg, &model, cfg.ncb_train_captures, cfg.ncb_seed)?;
            build_ncb(&model, NcbMode::TrainOnGradients, Some(&corpus), &cfg.ncb_train_config())?
        }
    };
    save_ncb(&ncb, &ncb_path(cfg))?;

    let mut loss_csv = String::from("epoch,mean_loss\n");
    for (i, v) in trace.iter().enumerate() {
        loss_csv.push_str(&format!("{i},{}\n", fmt_f64(*v)));
    }
    fs::write(cfg.output_dir.join("train_loss.csv"), loss_csv)?;
    write_manifest(cfg, "train")
}

/// Fresh captures (and their source images/labels) drawn from a seed stream
/// disjoint from the training set.
fn capture_corpus(
    cfg: &ExperimentConfig,
    model: &glab_core::model::ModelGraph,
    count: usize,
    seed: u64,
) -> Result<Vec<(GradientCapture, Vec<usize>)>> {
    let sprite_cfg = SpriteConfig { count, ..cfg.sprite_config() };
    let ds = generate_sprites(&sprite_cfg, seed)?;
    let kind = loss_kind(cfg);
    ds.images
        .iter()
        .zip(&ds.label_sets)
        .map(|(img, labels)| Ok((client_step(model, img, labels, kind)?, labels.clone())))
        .collect()
}

fn eval_dataset(cfg: &ExperimentConfig) -> Result<SpriteDataset> {
    let sprite_cfg = SpriteConfig { count: cfg.capture_count, ..cfg.sprite_config() };
    generate_sprites(&sprite_cfg, cfg.capture_seed)
}

fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    if t.shape()[0] == 3 {
        write_ppm(t, path)
    } else {
        write_pgm(&to_gray(t)?, path)
    }
}

fn image_ext(cfg: &ExperimentConfig) -> &'static str {
    if cfg.dataset_channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    if path.extension().and_then(|e| e.to_str()) == Some("ppm") {
        to_gray(&read_ppm(path)?)
    } else {
        read_pgm(path)
    }
}

/// Write per-image ground truth and the gradient captures the attacker sees.
pub fn run_capture(cfg: &ExperimentConfig) -> Result<()> {
    let model = load_weights(&model_path(cfg))?;
    let ds = eval_dataset(cfg)?;
    let kind = loss_kind(cfg);
    let truth_dir = cfg.output_dir.join("truth");
    let cap_dir = cfg.output_dir.join("captures");
    fs::create_dir_all(&truth_dir)?;
    fs::create_dir_all(&cap_dir)?;
    let ext = image_ext(cfg);
    let mut labels_csv = String::from("index,labels\n");
    for (i, (img, labels)) in ds.images.iter().zip(&ds.label_sets).enumerate() {
        write_image(img, &truth_dir.join(format!("truth_{i:03}.{ext}")))?;
        let cap = client_step(&model, img, labels, kind)?;
        save_capture(&cap, &cap_dir.join(format!("cap_{i:03}.mgig")))?;
        let joined: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
        labels_csv.push_str(&format!("{i},{}\n", joined.join(";")));
    }
    fs::write(truth_dir.join("labels.csv"), labels_csv)?;
    write_manifest(cfg, "capture")
}

fn load_captures(cfg: &ExperimentConfig) -> Result<Vec<(usize, GradientCapture)>> {
    let cap_dir = cfg.output_dir.join("captures");
    let mut names: Vec<String> = fs::read_dir(&cap_dir)
        .map_err(|e| Error::Config(format!("cannot read captures at {cap_dir:?}: {e} (run `glab capture` first)")))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("cap_") && n.ends_with(".mgig"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no capture files in {cap_dir:?}")));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, n)| Ok((i, load_capture(&cap_dir.join(n))?)))
        .collect()
}

fn load_ncb_if_needed(cfg: &ExperimentConfig, strategy: Strategy) -> Result<Option<NcbGraph>> {
    if strategy != Strategy::Mgic {
        return Ok(None);
    }
    let path = ncb_path(cfg);
    if !path.exists() {
        return Err(Error::Config(format!(
            "MGIC needs the NCB at {path:?}; run `glab train` first"
        )));
    }
    Ok(Some(load_ncb(&path)?))
}

struct StrategyRun {
    reports: Vec<AttackReport>,
}

fn attack_all(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    model: &glab_core::model::ModelGraph,
    ncb: Option<&NcbGraph>,
    captures: &[(usize, GradientCapture)],
) -> Result<StrategyRun> {
    let attack_cfg = AttackConfig { strategy, ..cfg.attack_config() };
    let reports: Vec<Result<AttackReport>> = captures
        .par_iter()
        .map(|(_, cap)| run_attack(model, ncb, cap, &attack_cfg))
        .collect();
    let mut out = Vec::with_capacity(reports.len());
    for (i, r) in reports.into_iter().enumerate() {
        out.push(r.map_err(|e| Error::Attack(format!("capture {i}: {e}")))?);
    }
    Ok(StrategyRun { reports: out })
}

fn attack_csv(reports: &[AttackReport], strategy: Strategy) -> String {
    let mut csv = String::from(
        "index,strategy,final_objective,restart_index,iterations,nudge_count,gradient_fallback,edge_fallback,final_r_ca,labels\n",
    );
    for (i, r) in reports.iter().enumerate() {
        let labels: Vec<String> = r.hypothesis.labels.iter().map(|l| l.to_string()).collect();
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{}\n",
            strategy.name(),
            fmt_f64(r.final_objective),
            r.restart_index,
            r.objective_trace.len(),
            r.nudge_count,
            r.baseline_flags.gradient_fallback,
            r.baseline_flags.edge_fallback,
            fmt_f64(r.final_r_ca),
            labels.join(";"),
        ));
    }
    csv
}

fn write_reconstructions(
    cfg: &ExperimentConfig,
    dir: &Path,
    reports: &[AttackReport],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ext = image_ext(cfg);
    for (i, r) in reports.iter().enumerate() {
        write_image(&r.reconstruction, &dir.join(format!("rec_{i:03}.{ext}")))?;
    }
    Ok(())
}

/// Run the configured strategy on every capture in the output directory.
pub fn run_attack_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let model = load_weights(&model_path(cfg))?;
    let strategy = cfg.attack_strategy;
    let ncb = load_ncb_if_needed(cfg, strategy)?;
    let captures = load_captures(cfg)?;
    let run = attack_all(cfg, strategy, &model, ncb.as_ref(), &captures)?;
    write_reconstructions(cfg, &cfg.output_dir.join("recon").join(strategy.name()), &run.reports)?;
    fs::write(
        cfg.output_dir.join(format!("attack_{}.csv", strategy.name())),
        attack_csv(&run.reports, strategy),
    )?;
    write_manifest(cfg, "attack")
}

fn parse_attack_csv(path: &Path) -> Result<BTreeMap<usize, f64>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read {path:?}: {e} (run `glab attack` first)"))
    })?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        let mut fields = line.split(',');
        let idx: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Format { detail: format!("bad csv row {line:?}"), offset: 0 })?;
        let objective: f64 = fields
            .nth(1)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Format { detail: format!("bad csv row {line:?}"), offset: 0 })?;
        out.insert(idx, objective);
    }
    Ok(out)
}

/// Join reconstructions with ground truth: per-image PSNR/SSIM plus the
/// final objective from the attack stage. The one place truth re-enters.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<()> {
    let strategy = cfg.attack_strategy;
    let truth_dir = cfg.output_dir.join("truth");
    let recon_dir = cfg.output_dir.join("recon").join(strategy.name());
    let objectives =
        parse_attack_csv(&cfg.output_dir.join(format!("attack_{}.csv", strategy.name())))?;
    let ext = image_ext(cfg);
    let mut csv = String::from("index,psnr_db,ssim,final_objective\n");
    for (&idx, objective) in &objectives {
        let truth = read_gray(&truth_dir.join(format!("truth_{idx:03}.{ext}")))?;
        let recon = read_gray(&recon_dir.join(format!("rec_{idx:03}.{ext}")))?;
        let p = psnr(&truth, &recon)?;
        let s = ssim(&truth, &recon)?;
        csv.push_str(&format!("{idx},{},{},{}\n", fmt_f64(p), fmt_f64(s), fmt_f64(*objective)));
    }
    fs::write(cfg.output_dir.join(format!("metrics_{}.csv", strategy.name())), csv)?;
    write_manifest(cfg, "eval")
}

pub struct BenchRow {
    pub strategy: Strategy,
    pub index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub final_objective: f64,
    pub ca_error: f64,
    pub nudge_count: u64,
}

/// CA_t/CA_g distance for a finished reconstruction, measured the same way
/// for every strategy: both points recomputed from the artifacts.
fn ca_error(capture: &GradientCapture, recon: &Tensor, h: usize, w: usize) -> Result<f64> {
    let head = capture
        .grads()
        .iter()
        .rev()
        .find(|(name, t)| name.ends_with("|w") && t.shape().len() == 2 && t.shape()[0] == capture.class_count)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Contract("capture lacks a head weight gradient".into()))?;
    let (ca_g, _) = baseline_from_gradients(head, h, w)?;
    let gray = to_gray(recon)?;
    let max = gray.max_value();
    let edges = canny(&gray, 0.8 * max, 0.9 * max)?;
    let (ca_t, _) = baseline_from_edges(&edges);
    Ok(ca_g.dist(&ca_t))
}

/// Equal-budget comparison of several strategies over the same captures.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let model = load_weights(&model_path(cfg))?;
    let captures = load_captures(cfg)?;
    let truth_dir = cfg.output_dir.join("truth");
    let ext = image_ext(cfg);
    let [_, h, w] = model.input_shape;

    let mut rows: Vec<BenchRow> = Vec::new();
    for &strategy in &cfg.bench_strategies {
        let ncb = load_ncb_if_needed(cfg, strategy)?;
        let run = attack_all(cfg, strategy, &model, ncb.as_ref(), &captures)?;
        let dir = cfg.output_dir.join("bench").join(strategy.name());
        write_reconstructions(cfg, &dir, &run.reports)?;
        fs::write(
            cfg.output_dir.join(format!("attack_{}.csv", strategy.name())),
            attack_csv(&run.reports, strategy),
        )?;
        for (i, report) in run.reports.iter().enumerate() {
            let truth = read_gray(&truth_dir.join(format!("truth_{i:03}.{ext}")))?;
            let recon = read_gray(&dir.join(format!("rec_{i:03}.{ext}")))?;
            let err = ca_error(&captures[i].1, &report.reconstruction, h, w)?;
            rows.push(BenchRow {
                strategy,
                index: i,
                psnr_db: psnr(&truth, &recon)?,
                ssim: ssim(&truth, &recon)?,
                final_objective: report.final_objective,
                ca_error: err,
                nudge_count: report.nudge_count,
            });
        }
    }

    let mut csv = String::from("strategy,index,psnr_db,ssim,final_objective,ca_error,nudge_count\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.strategy.name(),
            r.index,
            fmt_f64(r.psnr_db),
            fmt_f64(r.ssim),
            fmt_f64(r.final_objective),
            fmt_f64(r.ca_error),
            r.nudge_count
        ));
    }
    fs::write(cfg.output_dir.join("bench.csv"), csv)?;

    let mut summary =
        String::from("strategy,mean_psnr,median_psnr,mean_ssim,median_ssim,mean_objective,median_objective,mean_ca_error,median_ca_error\n");
    for &strategy in &cfg.bench_strategies {
        let of = |f: fn(&BenchRow) -> f64| -> Vec<f64> {
            rows.iter().filter(|r| r.strategy == strategy).map(f).collect()
        };
        let psnrs = of(|r| r.psnr_db);
        let ssims = of(|r| r.ssim);
        let objs = of(|r| r.final_objective);
        let cas = of(|r| r.ca_error);
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            strategy.name(),
            fmt_f64(mean(&psnrs)),
            fmt_f64(median(&psnrs)),
            fmt_f64(mean(&ssims)),
            fmt_f64(median(&ssims)),
            fmt_f64(mean(&objs)),
            fmt_f64(median(&objs)),
            fmt_f64(mean(&cas)),
            fmt_f64(median(&cas)),
        ));
    }
    fs::write(cfg.output_dir.join("bench_summary.csv"), summary)?;
    write_manifest(cfg, "bench")?;
    Ok(rows)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Deterministic N(0,1) image used by diagnostics.
pub fn gaussian_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.normal()).collect())
        .expect("normal draws are finite")
}
