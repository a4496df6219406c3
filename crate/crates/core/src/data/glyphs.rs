//! Procedural multi-label images of coloured glyphs.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Split};
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;

/// Glyph classes in label order.
pub const GLYPH_NAMES: [&str; 8] =
    ["disk", "square", "triangle", "cross", "ring", "bar-horizontal", "bar-vertical", "diamond"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphDatasetConfig {
    pub labels: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_scale: usize,
    pub max_scale: usize,
    /// Glyph colour value is drawn uniformly from `[1 - jitter, 1]`.
    pub brightness_jitter: f64,
    pub background_noise: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for GlyphDatasetConfig {
    fn default() -> Self {
        Self {
            labels: 8,
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 4,
            min_scale: 8,
            max_scale: 20,
            brightness_jitter: 0.3,
            background_noise: 0.03,
            train_count: 2000,
            test_count: 500,
            seed: 7,
        }
    }
}

impl GlyphDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("dataset: {msg}")));
        if !(2..=GLYPH_NAMES.len()).contains(&self.labels) {
            return bad("labels must be in 2..=8");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > self.labels {
            return bad("object count range must satisfy 1 <= min <= max <= labels");
        }
        if self.min_scale < 3 || self.min_scale > self.max_scale || self.max_scale > self.height.min(self.width) {
            return bad("glyph scale range must fit inside the image");
        }
        if self.height % 16 != 0 || self.width % 16 != 0 || self.height == 0 || self.width == 0 {
            return bad("image extents must be positive multiples of 16");
        }
        if !(0.0..=1.0).contains(&self.brightness_jitter) || self.background_noise < 0.0 {
            return bad("jitter must lie in [0,1] and noise must be non-negative");
        }
        Ok(())
    }
}

/// One drawn glyph: class, bounding box (top-left + side) and RGB colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glyph {
    pub class: usize,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub color: [f64; 3],
}

impl Glyph {
    /// Whether pixel `(x, y)` lies inside the glyph's shape.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.size || y >= self.y0 + self.size {
            return false;
        }
        let half = self.size as f64 / 2.0;
        let u = (x as f64 + 0.5 - self.x0 as f64 - half) / half;
        let v = (y as f64 + 0.5 - self.y0 as f64 - half) / half;
        let r2 = u * u + v * v;
        match self.class {
            0 => r2 <= 1.0,
            1 => u.abs() <= 0.85 && v.abs() <= 0.85,
            2 => v <= 0.9 && u.abs() <= (v + 1.0) / 2.0,
            3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
            4 => (0.3..=1.0).contains(&r2),
            5 => u.abs() <= 1.0 && v.abs() <= 0.3,
            6 => u.abs() <= 0.3 && v.abs() <= 1.0,
            7 => u.abs() + v.abs() <= 1.0,
            _ => false,
        }
    }

    fn overlaps(&self, other: &Glyph, margin: usize) -> bool {
        let (a0, a1) = (self.x0, self.x0 + self.size + margin);
        let (b0, b1) = (other.x0, other.x0 + other.size + margin);
        let (c0, c1) = (self.y0, self.y0 + self.size + margin);
        let (d0, d1) = (other.y0, other.y0 + other.size + margin);
        a0 < b1 && b0 < a1 && c0 < d1 && d0 < c1
    }
}

/// Fixed hue per class, evenly spaced around the colour wheel.
fn class_color(class: usize, labels: usize, value: f64) -> [f64; 3] {
    let hue = class as f64 / labels as f64 * 6.0;
    let sat = 0.85;
    let c = value * sat;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = value - c;
    [r + m, g + m, b + m]
}

const PLACEMENT_TRIES: usize = 200;
const BACKGROUND: f64 = 0.1;

/// Samples the glyph descriptors of one image.
pub fn sample_glyphs(cfg: &GlyphDatasetConfig, rng: &mut impl Rng) -> Vec<Glyph> {
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut classes = sample(rng, cfg.labels, count).into_vec();
    classes.sort_unstable();
    let mut placed: Vec<Glyph> = Vec::with_capacity(count);
    for class in classes {
        let value = 1.0 - rng.random::<f64>() * cfg.brightness_jitter;
        let color = class_color(class, cfg.labels, value);
        let mut found = None;
        for attempt in 0..PLACEMENT_TRIES {
            // the second half of the attempts fall back to the smallest glyph size
            let size = if attempt < PLACEMENT_TRIES / 2 {
                rng.random_range(cfg.min_scale..=cfg.max_scale)
            } else {
                cfg.min_scale
            };
            let x0 = rng.random_range(0..=cfg.width - size);
            let y0 = rng.random_range(0..=cfg.height - size);
            let g = Glyph { class, x0, y0, size, color };
            if placed.iter().all(|p| !p.overlaps(&g, 1)) {
                found = Some(g);
                break;
            }
        }
        // a glyph that cannot be placed without overlap is dropped, and so is its label
        placed.extend(found);
    }
    placed
}

/// Rasterizes glyphs over a noisy background into interleaved RGB bytes, and
/// returns the multi-hot row of classes with at least one visible pixel.
pub fn render(cfg: &GlyphDatasetConfig, glyphs: &[Glyph], rng: &mut impl Rng) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = (cfg.height, cfg.width);
    let mut pixels = vec![0u8; h * w * 3];
    let mut visible = vec![0u8; cfg.labels];
    let noise = rand_distr::Normal::new(0.0, cfg.background_noise.max(0.0)).expect("valid std");
    for y in 0..h {
        for x in 0..w {
            let top = glyphs.iter().rev().find(|g| g.covers(x, y));
            let base = match top {
                Some(g) => {
                    visible[g.class] = 1;
                    g.color
                }
                None => [BACKGROUND; 3],
            };
            for c in 0..3 {
                let n: f64 = if cfg.background_noise > 0.0 { rng.sample(noise) } else { 0.0 };
                let v = (base[c] + n).clamp(0.0, 1.0);
                pixels[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    (pixels, visible)
}

/// Multi-hot row implied by a set of glyph descriptors alone.
pub fn labels_of(glyphs: &[Glyph], labels: usize) -> Vec<u8> {
    let mut row = vec![0u8; labels];
    glyphs.iter().for_each(|g| row[g.class] = 1);
    row
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    fn tag(self) -> u64 {
        match self {
            SplitKind::Train => 1,
            SplitKind::Test => 2,
        }
    }
}

/// Generates one split. Image `i` depends only on `(seed, split, i)`.
pub fn generate_split(cfg: &GlyphDatasetConfig, kind: SplitKind) -> Result<Split> {
    cfg.validate()?;
    let count = match kind {
        SplitKind::Train => cfg.train_count,
        SplitKind::Test => cfg.test_count,
    };
    let mut pixels = Vec::with_capacity(count * cfg.height * cfg.width * 3);
    let mut labels = Vec::with_capacity(count * cfg.labels);
    let mut glyphs = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, kind.tag(), i as u64]));
        let gs = sample_glyphs(cfg, &mut rng);
        let (px, visible) = render(cfg, &gs, &mut rng);
        debug_assert_eq!(visible, labels_of(&gs, cfg.labels));
        pixels.extend_from_slice(&px);
        labels.extend_from_slice(&visible);
        glyphs.push(gs);
    }
    let labels = LabelMatrix::new(count, cfg.labels, labels)?;
    Split::new(cfg.height, cfg.width, pixels, labels).map(|s| s.with_glyphs(glyphs))
}

/// Train and test splits for a configuration.
pub fn generate(cfg: &GlyphDatasetConfig) -> Result<(Split, Split)> {
    Ok((generate_split(cfg, SplitKind::Train)?, generate_split(cfg, SplitKind::Test)?))
}
