//! Experiment configuration: plain `key=value` lines with `#` comments and
//! dotted namespaces. Every key has a default; unknown keys are rejected.
//! The canonical dump is itself a valid config file, which is how manifests
//! stay rerunnable.

use std::path::{Path, PathBuf};

use glab_core::attack::{AttackConfig, Strategy};
use glab_core::error::{Error, Result};
use glab_core::model::{NcbMode, NcbTrainConfig};

use crate::csvfmt::fmt_f64;
use crate::sprites::{DatasetMode, SpriteConfig};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset_mode: DatasetMode,
    pub dataset_count: usize,
    pub dataset_channels: usize,
    pub dataset_height: usize,
    pub dataset_width: usize,
    pub dataset_class_count: usize,
    pub dataset_seed: u64,

    pub model_seed: u64,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_seed: u64,

    /// None resolves by dataset mode: copy for single-label, train for multi.
    pub ncb_mode: Option<NcbMode>,
    pub ncb_train_captures: usize,
    pub ncb_epochs: usize,
    pub ncb_lr: f64,
    pub ncb_seed: u64,

    pub capture_count: usize,
    pub capture_seed: u64,

    pub attack_strategy: Strategy,
    pub attack_alpha_tv: f64,
    pub attack_alpha_l2: f64,
    pub attack_alpha_ca: f64,
    pub attack_alpha_cpl: f64,
    pub attack_lr: f64,
    pub attack_max_iterations: usize,
    pub attack_restarts: usize,
    pub attack_seed: u64,
    /// None resolves by dataset mode: 2 for single-label, 3 for multi-label.
    pub attack_max_labels: Option<usize>,
    pub attack_label_threshold_factor: f64,
    pub attack_ncb_scale: f64,
    pub attack_clamp_pixels: bool,
    pub attack_ca_nudge: bool,
    pub attack_per_label_restarts: bool,

    pub bench_strategies: Vec<Strategy>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_mode: DatasetMode::SingleLabel,
            dataset_count: 256,
            dataset_channels: 1,
            dataset_height: 32,
            dataset_width: 32,
            dataset_class_count: 8,
            dataset_seed: 11,
            model_seed: 10,
            train_epochs: 30,
            train_lr: 0.05,
            train_seed: 12,
            ncb_mode: None,
            ncb_train_captures: 500,
            ncb_epochs: 60,
            ncb_lr: 3e-3,
            ncb_seed: 13,
            capture_count: 20,
            capture_seed: 14,
            attack_strategy: Strategy::Mgic,
            attack_alpha_tv: 1e-1,
            attack_alpha_l2: 1e-5,
            attack_alpha_ca: 1e-6,
            attack_alpha_cpl: 1e-2,
            attack_lr: 0.01,
            attack_max_iterations: 20_000,
            attack_restarts: 1,
            attack_seed: 0,
            attack_max_labels: None,
            attack_label_threshold_factor: 0.99,
            attack_ncb_scale: 7e8,
            attack_clamp_pixels: true,
            attack_ca_nudge: true,
            attack_per_label_restarts: false,
            bench_strategies: vec![Strategy::Ggi, Strategy::Mgic],
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {key}={value:?} as bool"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path, sets: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
        let mut cfg = Self::parse(&text)?;
        for (k, v) in sets {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset.mode" => {
                self.dataset_mode = match value {
                    "single-label" => DatasetMode::SingleLabel,
                    "multi-label" => DatasetMode::MultiLabel,
                    _ => {
                        return Err(Error::Config(format!(
                            "dataset.mode must be single-label or multi-label, got {value:?}"
                        )))
                    }
                }
            }
            "dataset.count" => self.dataset_count = parse_as(key, value)?,
            "dataset.channels" => self.dataset_channels = parse_as(key, value)?,
            "dataset.height" => self.dataset_height = parse_as(key, value)?,
            "dataset.width" => self.dataset_width = parse_as(key, value)?,
            "dataset.class_count" => self.dataset_class_count = parse_as(key, value)?,
            "dataset.seed" => self.dataset_seed = parse_as(key, value)?,
            "model.seed" => self.model_seed = parse_as(key, value)?,
            "train.epochs" => self.train_epochs = parse_as(key, value)?,
            "train.lr" => self.train_lr = parse_as(key, value)?,
            "train.seed" => self.train_seed = parse_as(key, value)?,
            "ncb.mode" => {
                self.ncb_mode = Some(match value {
                    "copy" => NcbMode::CopyWeights,
                    "train" => NcbMode::TrainOnGradients,
                    _ => {
                        return Err(Error::Config(format!(
                            "ncb.mode must be copy or train, got {value:?}"
                        )))
                    }
                })
            }
            "ncb.train_captures" => self.ncb_train_captures = parse_as(key, value)?,
            "ncb.epochs" => self.ncb_epochs = parse_as(key, value)?,
            "ncb.lr" => self.ncb_lr = parse_as(key, value)?,
            "ncb.seed" => self.ncb_seed = parse_as(key, value)?,
            "capture.count" => self.capture_count = parse_as(key, value)?,
            "capture.seed" => self.capture_seed = parse_as(key, value)?,
            "attack.strategy" => {
                self.attack_strategy = Strategy::parse(value).ok_or_else(|| {
                    Error::Config(format!("unknown strategy {value:?}"))
                })?
            }
            "attack.alpha_tv" => self.attack_alpha_tv = parse_as(key, value)?,
            "attack.alpha_l2" => self.attack_alpha_l2 = parse_as(key, value)?,
            "attack.alpha_ca" => self.attack_alpha_ca = parse_as(key, value)?,
            "attack.alpha_cpl" => self.attack_alpha_cpl = parse_as(key, value)?,
            "attack.lr" => self.attack_lr = parse_as(key, value)?,
            "attack.max_iterations" => self.attack_max_iterations = parse_as(key, value)?,
            "attack.restarts" => self.attack_restarts = parse_as(key, value)?,
            "attack.seed" => self.attack_seed = parse_as(key, value)?,
            "attack.max_labels" => self.attack_max_labels = Some(parse_as(key, value)?),
            "attack.label_threshold_factor" => {
                self.attack_label_threshold_factor = parse_as(key, value)?
            }
            "attack.ncb_scale" => self.attack_ncb_scale = parse_as(key, value)?,
            "attack.clamp_pixels" => self.attack_clamp_pixels = parse_bool(key, value)?,
            "attack.ca_nudge" => self.attack_ca_nudge = parse_bool(key, value)?,
            "attack.per_label_restarts" => {
                self.attack_per_label_restarts = parse_bool(key, value)?
            }
            "bench.strategies" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    let s = Strategy::parse(part.trim()).ok_or_else(|| {
                        Error::Config(format!("unknown strategy {part:?} in bench.strategies"))
                    })?;
                    out.push(s);
                }
                if out.is_empty() {
                    return Err(Error::Config("bench.strategies must be nonempty".into()));
                }
                self.bench_strategies = out;
            }
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn sprite_config(&self) -> SpriteConfig {
        SpriteConfig {
            mode: self.dataset_mode,
            count: self.dataset_count,
            channels: self.dataset_channels,
            height: self.dataset_height,
            width: self.dataset_width,
            class_count: self.dataset_class_count,
        }
    }

    pub fn resolved_max_labels(&self) -> usize {
        self.attack_max_labels.unwrap_or(match self.dataset_mode {
            DatasetMode::SingleLabel => 2,
            DatasetMode::MultiLabel => 3,
        })
    }

    pub fn resolved_ncb_mode(&self) -> NcbMode {
        self.ncb_mode.unwrap_or(match self.dataset_mode {
            DatasetMode::SingleLabel => NcbMode::CopyWeights,
            DatasetMode::MultiLabel => NcbMode::TrainOnGradients,
        })
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            strategy: self.attack_strategy,
            alpha_tv: self.attack_alpha_tv,
            alpha_l2: self.attack_alpha_l2,
            alpha_ca: self.attack_alpha_ca,
            alpha_cpl: self.attack_alpha_cpl,
            lr: self.attack_lr,
            max_iterations: self.attack_max_iterations,
            restarts: self.attack_restarts,
            seed: self.attack_seed,
            max_labels: self.resolved_max_labels(),
            label_threshold_factor: self.attack_label_threshold_factor,
            ncb_scale: self.attack_ncb_scale,
            clamp_pixels: self.attack_clamp_pixels,
            ca_nudge: self.attack_ca_nudge,
            per_label_restarts: self.attack_per_label_restarts,
        }
    }

    pub fn ncb_train_config(&self) -> NcbTrainConfig {
        NcbTrainConfig {
            epochs: self.ncb_epochs,
            lr: self.ncb_lr,
            seed: self.ncb_seed,
            ncb_scale: self.attack_ncb_scale,
        }
    }

    /// Canonical key=value dump; parses back to an identical configuration.
    pub fn dump(&self) -> String {
        let mode = match self.dataset_mode {
            DatasetMode::SingleLabel => "single-label",
            DatasetMode::MultiLabel => "multi-label",
        };
        let ncb_mode = match self.resolved_ncb_mode() {
            NcbMode::CopyWeights => "copy",
            NcbMode::TrainOnGradients => "train",
        };
        let strategies: Vec<&str> = self.bench_strategies.iter().map(|s| s.name()).collect();
        let mut lines = vec![
            format!("attack.alpha_ca={}", fmt_f64(self.attack_alpha_ca)),
            format!("attack.alpha_cpl={}", fmt_f64(self.attack_alpha_cpl)),
            format!("attack.alpha_l2={}", fmt_f64(self.attack_alpha_l2)),
            format!("attack.alpha_tv={}", fmt_f64(self.attack_alpha_tv)),
            format!("attack.ca_nudge={}", self.attack_ca_nudge),
            format!("attack.clamp_pixels={}", self.attack_clamp_pixels),
            format!(
                "attack.label_threshold_factor={}",
                fmt_f64(self.attack_label_threshold_factor)
            ),
            format!("attack.lr={}", fmt_f64(self.attack_lr)),
            format!("attack.max_iterations={}", self.attack_max_iterations),
            format!("attack.max_labels={}", self.resolved_max_labels()),
            format!("attack.ncb_scale={}", fmt_f64(self.attack_ncb_scale)),
            format!("attack.per_label_restarts={}", self.attack_per_label_restarts),
            format!("attack.restarts={}", self.attack_restarts),
            format!("attack.seed={}", self.attack_seed),
            format!("attack.strategy={}", self.attack_strategy.name()),
            format!("bench.strategies={}", strategies.join(",")),
            format!("capture.count={}", self.capture_count),
            format!("capture.seed={}", self.capture_seed),
            format!("dataset.channels={}", self.dataset_channels),
            format!("dataset.class_count={}", self.dataset_class_count),
            format!("dataset.count={}", self.dataset_count),
            format!("dataset.height={}", self.dataset_height),
            format!("dataset.mode={mode}"),
            format!("dataset.seed={}", self.dataset_seed),
            format!("dataset.width={}", self.dataset_width),
            format!("model.seed={}", self.model_seed),
            format!("ncb.epochs={}", self.ncb_epochs),
            format!("ncb.lr={}", fmt_f64(self.ncb_lr)),
            format!("ncb.mode={ncb_mode}"),
            format!("ncb.seed={}", self.ncb_seed),
            format!("ncb.train_captures={}", self.ncb_train_captures),
            format!("output.dir={}", self.output_dir.display()),
            format!("train.epochs={}", self.train_epochs),
            format!("train.lr={}", fmt_f64(self.train_lr)),
            format!("train.seed={}", self.train_seed),
        ];
        lines.push(String::new());
        lines.join("\n")
    }

    pub fn hash(&self) -> u64 {
        glab_core::fnv1a(self.dump().as_bytes())
    }
}
