//! Experiment driver for the gradient-inversion laboratory: synthetic sprite
//! datasets, key=value experiment configs, and the train/capture/attack/
//! eval/bench pipeline used by the `glab` binary.

pub mod config;
pub mod csvfmt;
pub mod pipeline;
pub mod sprites;

pub use config::ExperimentConfig;
pub use sprites::{generate_sprites, DatasetMode, SpriteConfig, SpriteDataset};
