use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{preprocess_stream, DatasetSplit, PreprocessError, SampleMeta, SplitName, MAX_LEN, MIN_LEN, N_SUBCARRIERS, TARGET_RATE_HZ};
use crate::error::{DattaError, Result};
use crate::seed::rng_for;

/// Distortions that turn clean activity templates into one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub domain_id: u16,
    #[serde(default)]
    pub amplitude_offset: f32,
    #[serde(default = "one")]
    pub amplitude_scale: f32,
    /// Per-subcarrier gain; an empty vector means unit gain.
    #[serde(default)]
    pub subcarrier_response: Vec<f32>,
    #[serde(default)]
    pub noise_sigma: f32,
    #[serde(default)]
    pub rng_seed: u64,
}

fn one() -> f32 {
    1.0
}

impl SyntheticDomainSpec {
    /// Identity distortion for `domain_id`.
    pub fn clean(domain_id: u16, rng_seed: u64) -> Self {
        Self {
            domain_id,
            amplitude_offset: 0.0,
            amplitude_scale: 1.0,
            subcarrier_response: vec![1.0; N_SUBCARRIERS],
            noise_sigma: 0.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_scale > 0.0) {
            return Err(DattaError::Config(format!(
                "domain {}: amplitude_scale must be positive",
                self.domain_id
            )));
        }
        if !self.subcarrier_response.is_empty() && self.subcarrier_response.len() != N_SUBCARRIERS {
            return Err(DattaError::Config(format!(
                "domain {}: subcarrier_response needs {N_SUBCARRIERS} entries",
                self.domain_id
            )));
        }
        if self.subcarrier_response.iter().any(|&g| !(g > 0.0)) {
            return Err(DattaError::Config(format!(
                "domain {}: subcarrier gains must be positive",
                self.domain_id
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(DattaError::Config(format!(
                "domain {}: noise_sigma must be non-negative",
                self.domain_id
            )));
        }
        Ok(())
    }

    fn gain(&self, f: usize) -> f32 {
        self.subcarrier_response.get(f).copied().unwrap_or(1.0)
    }
}

/// Produces clean 100 Hz packet streams for an activity. Must be a pure
/// function of `(activity, variant)`.
pub trait ActivityGenerator: Sync {
    fn n_activities(&self) -> usize;

    fn template(&self, activity: u8, variant: u64) -> Vec<Vec<f32>>;
}

/// Built-in generator: each activity is a band of subcarriers whose
/// amplitude oscillates with an activity-specific number of cycles, on top
/// of a static per-subcarrier multipath profile. Duration, phase, band
/// position and strength vary per variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternGenerator {
    pub n_activities: usize,
    /// The activity bands live on subcarriers `0..active_subcarriers`.
    pub active_subcarriers: usize,
    pub baseline: f32,
    pub modulation: f32,
    pub band_width: f32,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PatternGenerator {
    fn default() -> Self {
        Self {
            n_activities: 2,
            active_subcarriers: 20,
            baseline: 0.5,
            modulation: 0.4,
            band_width: 0.15,
            min_len: 140,
            max_len: 210,
            seed: 0,
        }
    }
}

impl PatternGenerator {
    pub fn static_profile(&self, f: usize) -> f32 {
        let x = f as f32 / N_SUBCARRIERS as f32;
        self.baseline * (1.0 + 0.3 * (std::f32::consts::TAU * 1.7 * x + 0.5).sin())
    }
}

impl ActivityGenerator for PatternGenerator {
    fn n_activities(&self) -> usize {
        self.n_activities
    }

    fn template(&self, activity: u8, variant: u64) -> Vec<Vec<f32>> {
        let mut rng = rng_for(self.seed, &[activity as u64, variant]);
        let lo = self.min_len.clamp(MIN_LEN, MAX_LEN);
        let hi = self.max_len.clamp(lo, MAX_LEN);
        let len = rng.random_range(lo..=hi);
        let k = activity as usize;
        let n = self.n_activities.max(1);
        let centre = (k as f32 + 0.5) / n as f32 + rng.random_range(-0.05..0.05);
        let cycles = (k + 1) as f32;
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let strength = self.modulation * rng.random_range(0.8..1.2);
        let active = self.active_subcarriers.clamp(1, N_SUBCARRIERS);

        (0..len)
            .map(|t| {
                let wave = 0.5 + 0.5 * (std::f32::consts::TAU * cycles * t as f32 / len as f32 + phase).sin();
                (0..N_SUBCARRIERS)
                    .map(|f| {
                        let mut v = self.static_profile(f);
                        if f < active {
                            let pos = (f as f32 + 0.5) / active as f32;
                            let band = (-(pos - centre).powi(2) / (2.0 * self.band_width.powi(2))).exp();
                            v += strength * band * wave;
                        }
                        v.max(0.0)
                    })
                    .collect()
            })
            .collect()
    }
}

/// A labelled, not yet preprocessed packet stream at 100 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStream {
    pub packets: Vec<Vec<f32>>,
    pub meta: SampleMeta,
}

/// Distorted streams before preprocessing. Sample `j` has activity
/// `j mod n_activities` and uses template variant `j`, so two domains built
/// with the same generator share their clean templates.
pub fn synthesize_raw(spec: &SyntheticDomainSpec, n: usize, generator: &dyn ActivityGenerator) -> Result<Vec<RawStream>> {
    spec.validate()?;
    let n_act = generator.n_activities().max(1);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let activity = (j % n_act) as u8;
        let mut packets = generator.template(activity, j as u64);
        let mut rng = rng_for(spec.rng_seed, &[spec.domain_id as u64, j as u64]);
        let noise = if spec.noise_sigma > 0.0 {
            Some(Normal::new(0.0f32, spec.noise_sigma).expect("validated sigma"))
        } else {
            None
        };
        for packet in &mut packets {
            for (f, v) in packet.iter_mut().enumerate() {
                *v = *v * spec.gain(f) * spec.amplitude_scale + spec.amplitude_offset;
                if let Some(d) = &noise {
                    *v += d.sample(&mut rng);
                }
            }
        }
        out.push(RawStream {
            packets,
            meta: SampleMeta {
                activity,
                domain: spec.domain_id,
                sample_id: format!("d{}-{j:05}", spec.domain_id),
            },
        });
    }
    Ok(out)
}

/// Synthesizes `n` preprocessed samples for one domain.
pub fn synthesize_domain(
    spec: &SyntheticDomainSpec,
    n: usize,
    generator: &dyn ActivityGenerator,
    name: SplitName,
) -> Result<DatasetSplit> {
    let mut samples = Vec::with_capacity(n);
    for raw in synthesize_raw(spec, n, generator)? {
        match preprocess_stream(&raw.packets, TARGET_RATE_HZ, raw.meta) {
            Ok(s) => samples.push(s),
            Err(PreprocessError::DegenerateRange { sample }) => {
                log::warn!("synthetic sample `{}` has constant amplitudes", sample.sample_id);
                samples.push(*sample);
            }
            Err(e) => log::warn!("synthetic stream rejected: {e}"),
        }
    }
    Ok(DatasetSplit::new(name, samples))
}
