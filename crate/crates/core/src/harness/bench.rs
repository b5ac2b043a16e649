//! Per-sample inference latency with batch size one.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::evaluate::Predictor;
use crate::data::CsiSample;
use crate::error::{DattaError, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::train::SourceStatistics;
use crate::tta::{AdaptationConfig, Adaptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 100,
            iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub variant: String,
    pub iterations: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(variant: impl Into<String>, ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            variant: variant.into(),
            iterations: ms.len(),
            mean_ms: mean,
            std_ms: var.sqrt(),
        }
    }
}

/// Times every predictor on the same samples. Iterations are interleaved
/// across predictors so slow periods of the machine affect all of them
/// alike. The first `warmup` rounds are not recorded.
pub fn time_predictors(
    predictors: &mut [(&str, &mut dyn Predictor)],
    samples: &[CsiSample],
    cfg: &BenchConfig,
) -> Result<Vec<LatencyStats>> {
    if samples.is_empty() {
        return Err(DattaError::EmptyDataset);
    }
    let mut times = vec![Vec::with_capacity(cfg.iterations); predictors.len()];
    for i in 0..cfg.warmup + cfg.iterations {
        let s = &samples[i % samples.len()];
        for (k, (_, p)) in predictors.iter_mut().enumerate() {
            let start = Instant::now();
            std::hint::black_box(p.observe(std::hint::black_box(s))?);
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if i >= cfg.warmup {
                times[k].push(ms);
            }
        }
    }
    Ok(predictors
        .iter()
        .zip(&times)
        .map(|((name, _), t)| LatencyStats::from_samples(*name, t))
        .collect())
}

/// Latency of the frozen model, test-time adaptation without resets and
/// with resets at `tta.reset_rate` (or the default rate if it is zero).
pub fn bench_inference<T: Scalar>(
    model: &Model<T>,
    stats: &SourceStatistics<T>,
    tta: &AdaptationConfig,
    samples: &[CsiSample],
    cfg: &BenchConfig,
) -> Result<Vec<LatencyStats>> {
    let mut frozen = model.clone();
    let mut adapt = Adaptor::new(
        model.clone(),
        stats.clone(),
        AdaptationConfig {
            reset_rate: 0.0,
            ..tta.clone()
        },
    )?;
    let rate = if tta.reset_rate > 0.0 {
        tta.reset_rate
    } else {
        AdaptationConfig::default().reset_rate
    };
    let mut adapt_reset = Adaptor::new(
        model.clone(),
        stats.clone(),
        AdaptationConfig {
            reset_rate: rate,
            ..tta.clone()
        },
    )?;
    time_predictors(
        &mut [("frozen", &mut frozen), ("tta", &mut adapt), ("tta_reset", &mut adapt_reset)],
        samples,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Observation;

    struct Counter(usize);

    impl Predictor for Counter {
        fn observe(&mut self, _: &CsiSample) -> Result<Observation> {
            self.0 += 1;
            Ok(Observation {
                prediction: 0,
                loss: None,
                drift: None,
            })
        }
    }

    #[test]
    fn warmup_is_excluded_from_the_statistics() {
        let s = CsiSample {
            amplitudes: vec![0.0; 30 * 220],
            activity: 0,
            domain: 0,
            valid_length: 120,
            sample_id: "x".into(),
        };
        let mut c = Counter(0);
        let cfg = BenchConfig {
            warmup: 7,
            iterations: 25,
        };
        let out = time_predictors(&mut [("c", &mut c)], &[s], &cfg).unwrap();
        assert_eq!(out[0].iterations, 25);
        assert_eq!(c.0, 32);
    }

    #[test]
    fn latency_stats_are_population_moments() {
        let s = LatencyStats::from_samples("v", &[1.0, 3.0]);
        assert_eq!((s.mean_ms, s.std_ms), (2.0, 1.0));
    }
}
