//! Ordered evaluation of a predictor over a stream of samples.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, macro_f1, rolling_f1};
use crate::data::{CsiSample, DatasetSplit};
use crate::error::{DattaError, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tta::Adaptor;

/// Window of the rolling F1 series.
pub const ROLLING_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceMode {
    /// Domains one after another in `domain_order`.
    #[default]
    Ascending,
    /// Domains one after another in reverse `domain_order`.
    Descending,
    /// Blocks of `block_len` samples, cycling through `domain_order`.
    Alternating,
    /// A seeded permutation of all selected samples.
    Shuffled,
}

/// Order in which a split is presented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceSpec {
    pub name: String,
    pub mode: SequenceMode,
    /// Domains taking part, in order. Empty means every domain of the split,
    /// ascending by id.
    pub domain_order: Vec<u16>,
    /// Samples used per domain, in split order. `None` uses all.
    pub per_domain: Option<usize>,
    pub block_len: usize,
    /// Stream length for alternating mode; samples of a domain are reused
    /// cyclically. Defaults to the number of selected samples.
    pub total: Option<usize>,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            name: "ascending".into(),
            mode: SequenceMode::Ascending,
            domain_order: Vec::new(),
            per_domain: None,
            block_len: 100,
            total: None,
            seed: 0,
        }
    }
}

impl SequenceSpec {
    pub fn new(mode: SequenceMode) -> Self {
        let name = match mode {
            SequenceMode::Ascending => "ascending",
            SequenceMode::Descending => "descending",
            SequenceMode::Alternating => "alternating",
            SequenceMode::Shuffled => "shuffled",
        };
        Self {
            name: name.into(),
            mode,
            ..Self::default()
        }
    }

    /// Indices into `split.samples` in presentation order.
    pub fn order(&self, split: &DatasetSplit) -> Result<Vec<usize>> {
        let mut by_domain: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (i, s) in split.samples.iter().enumerate() {
            by_domain.entry(s.domain).or_default().push(i);
        }
        let domains: Vec<u16> = if self.domain_order.is_empty() {
            by_domain.keys().copied().collect()
        } else {
            if let Some(&d) = self.domain_order.iter().find(|d| !by_domain.contains_key(d)) {
                return Err(DattaError::UnknownDomain { domain: d });
            }
            self.domain_order.clone()
        };
        let take = |d: &u16| -> Vec<usize> {
            let idx = &by_domain[d];
            idx[..self.per_domain.unwrap_or(idx.len()).min(idx.len())].to_vec()
        };
        Ok(match self.mode {
            SequenceMode::Ascending => domains.iter().flat_map(take).collect(),
            SequenceMode::Descending => domains.iter().rev().flat_map(take).collect(),
            SequenceMode::Shuffled => {
                let mut all: Vec<usize> = domains.iter().flat_map(take).collect();
                all.shuffle(&mut rng_for(self.seed, &[0x5348_5546]));
                all
            }
            SequenceMode::Alternating => {
                if self.block_len == 0 {
                    return Err(DattaError::Config("block_len must be positive".into()));
                }
                let pools: Vec<Vec<usize>> = domains.iter().map(take).collect();
                let total = self.total.unwrap_or(pools.iter().map(Vec::len).sum());
                let mut cursor = vec![0usize; pools.len()];
                let mut out = Vec::with_capacity(total);
                let mut block = 0;
                while out.len() < total && pools.iter().any(|p| !p.is_empty()) {
                    let k = block % pools.len();
                    block += 1;
                    if pools[k].is_empty() {
                        continue;
                    }
                    for _ in 0..self.block_len.min(total - out.len()) {
                        out.push(pools[k][cursor[k] % pools[k].len()]);
                        cursor[k] += 1;
                    }
                }
                out
            }
        })
    }
}

/// What a predictor reports for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub prediction: usize,
    pub loss: Option<f64>,
    pub drift: Option<f64>,
}

/// Anything that consumes a stream of samples and predicts activities.
pub trait Predictor {
    fn observe(&mut self, sample: &CsiSample) -> Result<Observation>;
}

impl<T: Scalar> Predictor for Model<T> {
    fn observe(&mut self, sample: &CsiSample) -> Result<Observation> {
        Ok(Observation {
            prediction: self.predict(sample)?,
            loss: None,
            drift: None,
        })
    }
}

impl<T: Scalar> Predictor for Adaptor<T> {
    fn observe(&mut self, sample: &CsiSample) -> Result<Observation> {
        let out = self.adapt_step(sample)?;
        Ok(Observation {
            prediction: out.prediction,
            loss: Some(out.loss),
            drift: Some(out.drift),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub domain: u16,
    pub truth: usize,
    pub prediction: usize,
    pub latency_ms: f64,
    pub loss: Option<f64>,
    pub drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<SampleRecord>,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Entry `k` covers records `k..k + ROLLING_WINDOW`.
    pub rolling_f1: Vec<f64>,
}

impl RunMetrics {
    pub fn from_records(records: Vec<SampleRecord>) -> Self {
        let truth: Vec<usize> = records.iter().map(|r| r.truth).collect();
        let pred: Vec<usize> = records.iter().map(|r| r.prediction).collect();
        Self {
            accuracy: accuracy(&truth, &pred),
            macro_f1: macro_f1(&truth, &pred),
            rolling_f1: rolling_f1(&truth, &pred, ROLLING_WINDOW),
            records,
        }
    }

    /// Domains in the order they were visited, with consecutive repeats collapsed.
    pub fn domain_runs(&self) -> Vec<u16> {
        let mut runs: Vec<u16> = Vec::new();
        for r in &self.records {
            if runs.last() != Some(&r.domain) {
                runs.push(r.domain);
            }
        }
        runs
    }
}

/// Feeds `split` to `predictor` in the order given by `sequence`, one
/// sample at a time.
pub fn evaluate(predictor: &mut dyn Predictor, split: &DatasetSplit, sequence: &SequenceSpec) -> Result<RunMetrics> {
    let order = sequence.order(split)?;
    let mut records = Vec::with_capacity(order.len());
    for i in order {
        let s = &split.samples[i];
        let start = Instant::now();
        let obs = predictor.observe(s)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(SampleRecord {
            sample_id: s.sample_id.clone(),
            domain: s.domain,
            truth: s.activity as usize,
            prediction: obs.prediction,
            latency_ms,
            loss: obs.loss,
            drift: obs.drift,
        });
    }
    Ok(RunMetrics::from_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitName, MAX_LEN, N_SUBCARRIERS};

    fn sample(domain: u16, activity: u8, k: usize) -> CsiSample {
        CsiSample {
            amplitudes: vec![0.0; N_SUBCARRIERS * MAX_LEN],
            activity,
            domain,
            valid_length: 150,
            sample_id: format!("{domain}-{k}"),
        }
    }

    fn split() -> DatasetSplit {
        let mut samples = Vec::new();
        for d in [0u16, 1, 2] {
            for k in 0..6 {
                samples.push(sample(d, (k % 6) as u8, k));
            }
        }
        DatasetSplit::new(SplitName::Test, samples)
    }

    struct Oracle;

    impl Predictor for Oracle {
        fn observe(&mut self, s: &CsiSample) -> Result<Observation> {
            Ok(Observation {
                prediction: s.activity as usize,
                loss: None,
                drift: None,
            })
        }
    }

    struct Constant(usize);

    impl Predictor for Constant {
        fn observe(&mut self, _: &CsiSample) -> Result<Observation> {
            Ok(Observation {
                prediction: self.0,
                loss: None,
                drift: None,
            })
        }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let m = evaluate(&mut Oracle, &split(), &SequenceSpec::new(SequenceMode::Shuffled)).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        let m = evaluate(&mut Constant(2), &split(), &SequenceSpec::new(SequenceMode::Ascending)).unwrap();
        assert!((m.accuracy - 1.0 / 6.0).abs() < 1e-12);
        assert!((m.macro_f1 - 1.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn every_sample_is_consumed_once_in_order() {
        let s = split();
        for mode in [SequenceMode::Ascending, SequenceMode::Descending, SequenceMode::Shuffled] {
            let m = evaluate(&mut Oracle, &s, &SequenceSpec::new(mode)).unwrap();
            let mut ids: Vec<_> = m.records.iter().map(|r| r.sample_id.clone()).collect();
            ids.sort();
            let mut expected: Vec<_> = s.samples.iter().map(|x| x.sample_id.clone()).collect();
            expected.sort();
            assert_eq!(ids, expected);
        }
        let asc = evaluate(&mut Oracle, &s, &SequenceSpec::new(SequenceMode::Ascending)).unwrap();
        let desc = evaluate(&mut Oracle, &s, &SequenceSpec::new(SequenceMode::Descending)).unwrap();
        assert_eq!(asc.domain_runs(), vec![0, 1, 2]);
        assert_eq!(desc.domain_runs(), vec![2, 1, 0]);
    }

    #[test]
    fn alternating_order_follows_the_blocks() {
        let spec = SequenceSpec {
            domain_order: vec![0, 2],
            block_len: 4,
            total: Some(20),
            ..SequenceSpec::new(SequenceMode::Alternating)
        };
        let m = evaluate(&mut Oracle, &split(), &spec).unwrap();
        let domains: Vec<u16> = m.records.iter().map(|r| r.domain).collect();
        let expected: Vec<u16> = (0..20).map(|i| if (i / 4) % 2 == 0 { 0 } else { 2 }).collect();
        assert_eq!(domains, expected);
        // The six samples of domain 0 are reused cyclically.
        assert_eq!(m.records[8].sample_id, "0-4");
        assert_eq!(m.records[16].sample_id, "0-2");
    }

    #[test]
    fn shuffled_order_is_seeded() {
        let s = split();
        let spec = SequenceSpec::new(SequenceMode::Shuffled);
        assert_eq!(spec.order(&s).unwrap(), spec.order(&s).unwrap());
        let other = SequenceSpec { seed: 9, ..spec.clone() };
        assert_ne!(spec.order(&s).unwrap(), other.order(&s).unwrap());
    }

    #[test]
    fn unknown_domain_is_reported() {
        let spec = SequenceSpec {
            domain_order: vec![0, 7],
            ..SequenceSpec::default()
        };
        assert!(matches!(
            evaluate(&mut Oracle, &split(), &spec),
            Err(DattaError::UnknownDomain { domain: 7 })
        ));
    }

    #[test]
    fn per_domain_limits_the_samples() {
        let spec = SequenceSpec {
            per_domain: Some(2),
            ..SequenceSpec::default()
        };
        assert_eq!(spec.order(&split()).unwrap(), vec![0, 1, 6, 7, 12, 13]);
    }
}
