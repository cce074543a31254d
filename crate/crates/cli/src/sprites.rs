//! Synthetic sprite dataset: eight shape classes rendered onto a dark
//! background, with exact single- or multi-label ground truth. Generation is
//! a pure function of (config, seed).

use glab_core::error::{Error, Result};
use glab_core::rng::Rng;
use glab_core::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 8] =
    ["square", "circle", "triangle", "cross", "ring", "bar-h", "bar-v", "dot"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetMode {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Debug)]
pub struct SpriteConfig {
    pub mode: DatasetMode,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
}

/// Images in [0,1] with their exact label sets.
#[derive(Clone, Debug)]
pub struct SpriteDataset {
    pub images: Vec<Tensor>,
    pub label_sets: Vec<Vec<usize>>,
    pub class_count: usize,
    pub mode: DatasetMode,
}

impl SpriteDataset {
    pub fn samples(&self) -> Vec<(Tensor, Vec<usize>)> {
        self.images.iter().cloned().zip(self.label_sets.iter().cloned()).collect()
    }
}

pub fn generate_sprites(cfg: &SpriteConfig, seed: u64) -> Result<SpriteDataset> {
    if cfg.class_count == 0 || cfg.class_count > SHAPE_NAMES.len() {
        return Err(Error::Config(format!(
            "class_count must be in 1..={}, got {}",
            SHAPE_NAMES.len(),
            cfg.class_count
        )));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {}", cfg.channels)));
    }
    if cfg.mode == DatasetMode::MultiLabel && (cfg.height < 32 || cfg.width < 32) {
        return Err(Error::Config(format!(
            "multi-label placement needs at least 32x32, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    if cfg.height < 16 || cfg.width < 16 {
        return Err(Error::Config(format!(
            "sprite images need at least 16x16, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(cfg.count);
    let mut label_sets = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let (img, labels) = match cfg.mode {
            DatasetMode::SingleLabel => render_single(cfg, &mut rng)?,
            DatasetMode::MultiLabel => render_multi(cfg, &mut rng)?,
        };
        images.push(img);
        label_sets.push(labels);
    }
    Ok(SpriteDataset { images, label_sets, class_count: cfg.class_count, mode: cfg.mode })
}

fn render_single(cfg: &SpriteConfig, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
    let class = rng.below(cfg.class_count);
    let mut img = Tensor::zeros(&[cfg.channels, cfg.height, cfg.width]);
    let size = 10 + rng.below((cfg.height.min(cfg.width) / 2).saturating_sub(10).max(1));
    let half = size / 2 + 1;
    let row = half + rng.below(cfg.height - 2 * half);
    let col = half + rng.below(cfg.width - 2 * half);
    let intensity = sample_intensity(cfg.channels, rng);
    draw(&mut img, cfg, class, row, col, size, &intensity);
    Ok((img, vec![class]))
}

fn render_multi(cfg: &SpriteConfig, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
    let k = 1 + rng.below(3);
    let mut classes: Vec<usize> = (0..cfg.class_count).collect();
    rng.shuffle(&mut classes);
    classes.truncate(k);
    classes.sort_unstable();

    // Jittered 2x2 grid keeps sprites disjoint by construction.
    let cell_h = cfg.height / 2;
    let cell_w = cfg.width / 2;
    let mut cells: Vec<(usize, usize)> = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
    rng.shuffle(&mut cells);

    let mut img = Tensor::zeros(&[cfg.channels, cfg.height, cfg.width]);
    for (i, &class) in classes.iter().enumerate() {
        let (cr, cc) = cells[i];
        let mut placed = false;
        for attempt in 0..16 {
            let max_size = cell_h.min(cell_w).saturating_sub(4 + attempt);
            if max_size < 8 {
                break;
            }
            let size = 8 + rng.below(max_size - 7);
            let half = size / 2 + 1;
            let jitter_r = rng.below(5) as i64 - 2;
            let jitter_c = rng.below(5) as i64 - 2;
            let row = (cr * cell_h + cell_h / 2) as i64 + jitter_r;
            let col = (cc * cell_w + cell_w / 2) as i64 + jitter_c;
            let fits = row - half as i64 >= (cr * cell_h) as i64
                && col - half as i64 >= (cc * cell_w) as i64
                && row + half as i64 <= ((cr + 1) * cell_h) as i64
                && col + half as i64 <= ((cc + 1) * cell_w) as i64;
            if fits {
                let intensity = sample_intensity(cfg.channels, rng);
                draw(&mut img, cfg, class, row as usize, col as usize, size, &intensity);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "sprite placement infeasible in a {}x{} cell",
                cell_h, cell_w
            )));
        }
    }
    Ok((img, classes))
}

fn sample_intensity(channels: usize, rng: &mut Rng) -> Vec<f64> {
    (0..channels).map(|_| rng.uniform(0.4, 1.0)).collect()
}

fn draw(img: &mut Tensor, cfg: &SpriteConfig, class: usize, row: usize, col: usize, size: usize, intensity: &[f64]) {
    let (h, w) = (cfg.height, cfg.width);
    let half = (size / 2) as i64;
    let thick = (size as i64 / 6).max(2);
    let plane = h * w;
    let data = img.data_mut();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let dr = r - row as i64;
            let dc = c - col as i64;
            let inside = match class {
                0 => dr.abs() <= half && dc.abs() <= half,
                1 => dr * dr + dc * dc <= half * half,
                2 => {
                    // Filled isoceles triangle pointing up.
                    dr >= -half
                        && dr <= half
                        && dc.abs() * 2 * half <= (dr + half) * half
                }
                3 => {
                    (dr.abs() <= thick && dc.abs() <= half)
                        || (dc.abs() <= thick && dr.abs() <= half)
                }
                4 => {
                    let d2 = dr * dr + dc * dc;
                    let inner = (half - thick).max(1);
                    d2 <= half * half && d2 >= inner * inner
                }
                5 => dr.abs() <= thick && dc.abs() <= half,
                6 => dc.abs() <= thick && dr.abs() <= half,
                _ => dr * dr + dc * dc <= thick * thick,
            };
            if inside {
                for (ch, &v) in intensity.iter().enumerate() {
                    data[ch * plane + (r as usize) * w + c as usize] = v;
                }
            }
        }
    }
}
