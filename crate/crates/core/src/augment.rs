//! Random CSI augmentations used during training.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CsiSample, MAX_LEN, N_SUBCARRIERS};
use crate::error::{DattaError, Result};
use crate::seed::{hash_str, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub amplitude_jitter_sigma: f32,
    /// Rotations are drawn uniformly from `0..=fraction * valid_length`.
    pub max_rotation_fraction: f32,
    pub pixel_dropout_rate: f32,
    pub row_dropout_rate: f32,
    /// Probability with which each augmentation is applied.
    pub apply_probability: f32,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            amplitude_jitter_sigma: 0.05,
            max_rotation_fraction: 1.0,
            pixel_dropout_rate: 0.1,
            row_dropout_rate: 0.05,
            apply_probability: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration that never changes its input.
    pub fn disabled() -> Self {
        Self {
            apply_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f32| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(DattaError::Config(format!("augment.{name} = {v} is outside [0, 1]")))
            }
        };
        unit("max_rotation_fraction", self.max_rotation_fraction)?;
        unit("pixel_dropout_rate", self.pixel_dropout_rate)?;
        unit("row_dropout_rate", self.row_dropout_rate)?;
        unit("apply_probability", self.apply_probability)?;
        if !(self.amplitude_jitter_sigma >= 0.0) {
            return Err(DattaError::Config("augment.amplitude_jitter_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adds `N(0, sigma²)` noise to the non-padded entries and clamps to `[0, 1]`.
pub fn amplitude_perturb(s: &CsiSample, sigma: f32, rng: &mut impl Rng) -> CsiSample {
    let mut out = s.clone();
    if sigma <= 0.0 {
        return out;
    }
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    let len = s.valid_len();
    for row in out.amplitudes.chunks_mut(MAX_LEN) {
        for v in &mut row[..len] {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Cyclic shift of the first `valid_length` columns by `shift` (to the
/// right); the padding is left alone.
pub fn circular_rotate(s: &CsiSample, shift: i64) -> CsiSample {
    let mut out = s.clone();
    let len = s.valid_len();
    if len == 0 {
        return out;
    }
    let k = shift.rem_euclid(len as i64) as usize;
    for row in out.amplitudes.chunks_mut(MAX_LEN) {
        row[..len].rotate_right(k);
    }
    out
}

/// Replaces Bernoulli-selected pixels and whole subcarrier rows of the
/// non-padded region with the pre-dropout mean of that region. Returns the
/// augmented sample and the number of replaced entries.
pub fn dropout_mean_replace(s: &CsiSample, pixel_rate: f32, row_rate: f32, rng: &mut impl Rng) -> (CsiSample, usize) {
    let mut out = s.clone();
    let len = s.valid_len();
    if len == 0 || (pixel_rate <= 0.0 && row_rate <= 0.0) {
        return (out, 0);
    }
    let total: f64 = s
        .amplitudes
        .chunks(MAX_LEN)
        .flat_map(|row| row[..len].iter().map(|&v| v as f64))
        .sum();
    let mean = (total / (N_SUBCARRIERS * len) as f64) as f32;

    let mut replaced = 0;
    for row in out.amplitudes.chunks_mut(MAX_LEN) {
        let whole_row = row_rate > 0.0 && rng.random::<f32>() < row_rate;
        for v in &mut row[..len] {
            let drop = whole_row || (pixel_rate > 0.0 && rng.random::<f32>() < pixel_rate);
            if drop {
                *v = mean;
                replaced += 1;
            }
        }
    }
    (out, replaced)
}

/// Applies rotate, amplitude perturbation and dropout in that order, each
/// independently with `cfg.apply_probability`. The randomness is keyed by
/// `(cfg.rng_seed, sample_id)`.
pub fn augment(s: &CsiSample, cfg: &AugmentConfig) -> CsiSample {
    let mut rng = rng_for(cfg.rng_seed, &[hash_str(&s.sample_id)]);
    let p = cfg.apply_probability;
    let mut out = s.clone();

    if rng.random::<f32>() < p {
        let max_shift = (cfg.max_rotation_fraction * s.valid_len() as f32).floor() as i64;
        let shift = rng.random_range(0..=max_shift.max(0));
        out = circular_rotate(&out, shift);
    }
    if rng.random::<f32>() < p {
        out = amplitude_perturb(&out, cfg.amplitude_jitter_sigma, &mut rng);
    }
    if rng.random::<f32>() < p {
        out = dropout_mean_replace(&out, cfg.pixel_dropout_rate, cfg.row_dropout_rate, &mut rng).0;
    }
    out
}
