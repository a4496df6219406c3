use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::tensor::Real;

/// Label-preserving image augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Translations are drawn uniformly from `-max_shift..=max_shift` per axis; vacated pixels are zero.
    pub max_shift: usize,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, max_shift: 2, noise_std: 0.02 }
    }
}

impl AugmentConfig {
    pub fn flip_only() -> Self {
        Self { flip_prob: 0.5, max_shift: 0, noise_std: 0.0 }
    }

    pub fn identity() -> Self {
        Self { flip_prob: 0.0, max_shift: 0, noise_std: 0.0 }
    }
}

/// Horizontal mirror of a channel-first image.
pub fn flip_horizontal(image: &[Real], height: usize, width: usize) -> Vec<Real> {
    let mut out = vec![0.0; image.len()];
    for (plane_in, plane_out) in image.chunks(height * width).zip(out.chunks_mut(height * width)) {
        for y in 0..height {
            for x in 0..width {
                plane_out[y * width + x] = plane_in[y * width + width - 1 - x];
            }
        }
    }
    out
}

fn translate(image: &[Real], height: usize, width: usize, dx: isize, dy: isize) -> Vec<Real> {
    let mut out = vec![0.0; image.len()];
    for (plane_in, plane_out) in image.chunks(height * width).zip(out.chunks_mut(height * width)) {
        for y in 0..height {
            for x in 0..width {
                let sy = y as isize - dy;
                let sx = x as isize - dx;
                if (0..height as isize).contains(&sy) && (0..width as isize).contains(&sx) {
                    plane_out[y * width + x] = plane_in[sy as usize * width + sx as usize];
                }
            }
        }
    }
    out
}

/// Applies flip, then translation, then pixel noise to a channel-first
/// `3 × H × W` image. Random draws depend only on `seed`; results are clamped to `[0,1]`.
pub fn augment(image: &[Real], height: usize, width: usize, cfg: &AugmentConfig, seed: u64) -> Vec<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let shift = cfg.max_shift as i64;
    let dx = rng.random_range(-shift..=shift) as isize;
    let dy = rng.random_range(-shift..=shift) as isize;
    let mut out = if flip { flip_horizontal(image, height, width) } else { image.to_vec() };
    if dx != 0 || dy != 0 {
        out = translate(&out, height, width, dx, dy);
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("positive std");
        out.iter_mut().for_each(|v| *v += rng.sample(noise));
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Vec<Real> {
        (0..3 * h * w).map(|i| (i % 97) as Real / 97.0).collect()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(8, 6);
        assert_eq!(flip_horizontal(&flip_horizontal(&img, 8, 6), 8, 6), img);
    }

    #[test]
    fn identity_config_leaves_image_unchanged() {
        let img = ramp(16, 16);
        assert_eq!(augment(&img, 16, 16, &AugmentConfig::identity(), 99), img);
    }

    #[test]
    fn noise_mean_shift_matches_half_normal_expectation() {
        let img = vec![0.5; 3 * 64 * 64];
        let cfg = AugmentConfig { flip_prob: 0.0, max_shift: 0, noise_std: 0.02 };
        let out = augment(&img, 64, 64, &cfg, 3);
        let mad = out.iter().zip(&img).map(|(a, b)| (a - b).abs()).sum::<Real>() / img.len() as Real;
        let bound = 0.02 * (2.0 / std::f64::consts::PI).sqrt() * 1.5;
        assert!(mad <= bound, "mean abs change {mad} > {bound}");
        assert!(mad > 0.0);
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let img: Vec<Real> = (0..3 * 16 * 16).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let cfg = AugmentConfig { noise_std: 0.3, ..AugmentConfig::default() };
        for seed in 0..20 {
            assert!(augment(&img, 16, 16, &cfg, seed).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn translation_zero_pads() {
        let img = vec![1.0; 3 * 4 * 4];
        let out = translate(&img, 4, 4, 1, 0);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 1.0);
    }
}
