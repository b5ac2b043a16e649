//! Source feature statistics: per-layer channel means and variances over
//! all samples and token positions.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::data::CsiSample;
use crate::error::{DattaError, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats<T> {
    /// `1 × f_l`
    pub mean: Tensor<T>,
    /// `1 × f_l`, population variance.
    pub var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceStatistics<T> {
    /// Keyed by 1-based encoder layer.
    pub layers: BTreeMap<usize, LayerStats<T>>,
    /// Whether the class-token row took part.
    pub include_class_token: bool,
}

#[derive(Serialize, Deserialize)]
struct StatsMeta {
    layers: Vec<usize>,
    include_class_token: bool,
}

impl<T: Scalar> SourceStatistics<T> {
    pub fn layer(&self, l: usize) -> Option<&LayerStats<T>> {
        self.layers.get(&l)
    }

    pub fn save(&self, path: impl AsRef<Path>, model_hash: &str) -> Result<()> {
        let mut named = Vec::new();
        for (l, s) in &self.layers {
            named.push((format!("layer{l}.mean"), s.mean.clone()));
            named.push((format!("layer{l}.var"), s.var.clone()));
        }
        let meta = StatsMeta {
            layers: self.layers.keys().copied().collect(),
            include_class_token: self.include_class_token,
        };
        Archive::new("source_statistics", model_hash.to_string(), serde_json::to_value(meta)?, named).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = Archive::<T>::load(path)?;
        if archive.manifest.kind != "source_statistics" {
            return Err(DattaError::Format(format!("archive kind `{}` is not statistics", archive.manifest.kind)));
        }
        let meta: StatsMeta = serde_json::from_value(archive.manifest.metadata.clone())?;
        let mut layers = BTreeMap::new();
        for l in meta.layers {
            let get = |suffix: &str| {
                archive
                    .get(&format!("layer{l}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| DattaError::Format(format!("missing layer{l}.{suffix}")))
            };
            layers.insert(
                l,
                LayerStats {
                    mean: get("mean")?,
                    var: get("var")?,
                },
            );
        }
        Ok(Self {
            layers,
            include_class_token: meta.include_class_token,
        })
    }
}

/// Rows of a feature map that enter the statistics.
pub(crate) fn first_row(include_class_token: bool) -> usize {
    usize::from(!include_class_token)
}

/// Two-pass statistics over `n` items. `extract(i)` returns the feature
/// maps of item `i`, one per entry of `layer_ids` in ascending order.
pub fn statistics_over<T, F>(n: usize, extract: F, layer_ids: &[usize], include_class_token: bool) -> Result<SourceStatistics<T>>
where
    T: Scalar,
    F: Fn(usize) -> Result<Vec<Tensor<T>>> + Sync,
{
    if n == 0 {
        return Err(DattaError::EmptyDataset);
    }
    let mut ids = layer_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let skip = first_row(include_class_token);

    // Pass 1: sums and row counts per layer, accumulated in f64.
    let partial: Vec<Vec<(Vec<f64>, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let maps = extract(i)?;
            Ok(maps
                .iter()
                .map(|m| {
                    let mut sum = vec![0.0f64; m.cols()];
                    for r in skip..m.rows() {
                        for (s, &v) in sum.iter_mut().zip(m.row(r)) {
                            *s += v.as_f64();
                        }
                    }
                    (sum, m.rows() - skip)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
    let mut counts = Vec::with_capacity(ids.len());
    for k in 0..ids.len() {
        let width = partial[0][k].0.len();
        let mut total = vec![0.0f64; width];
        let mut count = 0usize;
        for p in &partial {
            for (t, v) in total.iter_mut().zip(&p[k].0) {
                *t += v;
            }
            count += p[k].1;
        }
        total.iter_mut().for_each(|t| *t /= count as f64);
        means.push(total);
        counts.push(count);
    }

    // Pass 2: squared deviations from the dataset mean.
    let partial: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let maps = extract(i)?;
            Ok(maps
                .iter()
                .zip(&means)
                .map(|(m, mu)| {
                    let mut sq = vec![0.0f64; m.cols()];
                    for r in skip..m.rows() {
                        for ((s, &v), &c) in sq.iter_mut().zip(m.row(r)).zip(mu) {
                            let d = v.as_f64() - c;
                            *s += d * d;
                        }
                    }
                    sq
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut layers = BTreeMap::new();
    for (k, &l) in ids.iter().enumerate() {
        let mut var = vec![0.0f64; means[k].len()];
        for p in &partial {
            for (t, v) in var.iter_mut().zip(&p[k]) {
                *t += v;
            }
        }
        let to_row = |v: &[f64]| Tensor::row_vector(v.iter().map(|&x| T::of(x)).collect());
        var.iter_mut().for_each(|t| *t /= counts[k] as f64);
        layers.insert(
            l,
            LayerStats {
                mean: to_row(&means[k]),
                var: to_row(&var),
            },
        );
    }
    Ok(SourceStatistics {
        layers,
        include_class_token,
    })
}

/// Eval-mode statistics of the given encoder layers over a dataset.
pub fn compute_source_statistics<T: Scalar>(
    model: &Model<T>,
    samples: &[CsiSample],
    layer_ids: &[usize],
    include_class_token: bool,
) -> Result<SourceStatistics<T>> {
    if layer_ids.is_empty() || layer_ids.iter().any(|&l| l == 0 || l > model.config().n_encoder_layers) {
        return Err(DattaError::Config(format!("invalid statistics layers {layer_ids:?}")));
    }
    let mut ids = layer_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let depth = *ids.last().expect("non-empty");
    statistics_over(
        samples.len(),
        |i| {
            let maps = model.layer_features(&samples[i].to_tensor(), depth)?;
            Ok(ids.iter().map(|&l| maps[l - 1].clone()).collect())
        },
        &ids,
        include_class_token,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rows_have_zero_variance() {
        let v = [0.5, -2.0, 3.0];
        let map = Tensor::from_vec(4, 3, v.repeat(4)).unwrap();
        let s = statistics_over(1, |_| Ok(vec![map.clone()]), &[1], true).unwrap();
        assert_eq!(s.layers[&1].mean.data(), &v);
        assert!(s.layers[&1].var.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn alternating_rows_have_variance_v_squared() {
        let v = [1.5, -0.5];
        let rows: Vec<f64> = (0..6).flat_map(|r| if r % 2 == 0 { v.to_vec() } else { v.iter().map(|x| -x).collect() }).collect();
        let map = Tensor::from_vec(6, 2, rows).unwrap();
        let s = statistics_over(1, |_| Ok(vec![map.clone()]), &[2], true).unwrap();
        assert!(s.layers[&2].mean.data().iter().all(|&m| m.abs() < 1e-15));
        assert_eq!(s.layers[&2].var.data(), &[2.25, 0.25]);
    }

    #[test]
    fn class_token_row_can_be_excluded() {
        let map = Tensor::from_vec(3, 1, vec![100.0, 1.0, 3.0]).unwrap();
        let s = statistics_over(1, |_| Ok(vec![map.clone()]), &[1], false).unwrap();
        assert_eq!(s.layers[&1].mean.data(), &[2.0]);
        assert_eq!(s.layers[&1].var.data(), &[1.0]);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            statistics_over::<f64, _>(0, |_| Ok(vec![]), &[1], true),
            Err(DattaError::EmptyDataset)
        ));
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = Tensor::from_vec(2, 2, vec![1.0f32, 2.0, 3.0, 5.0]).unwrap();
        let s = statistics_over(1, |_| Ok(vec![map.clone(), map.clone()]), &[1, 3], true).unwrap();
        let path = dir.path().join("stats.ntar");
        s.save(&path, "hash").unwrap();
        assert_eq!(SourceStatistics::<f32>::load(&path).unwrap(), s);
    }
}
