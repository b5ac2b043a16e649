//! Linear probes: multinomial logistic regression fitted on frozen features.

use serde::{Deserialize, Serialize};

use crate::error::{DattaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Softmax regression on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `n_classes × (dim + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LinearProbe {
    /// Full-batch gradient descent on the mean cross-entropy.
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.is_empty() {
            return Err(DattaError::EmptyDataset);
        }
        if x.len() != y.len() || y.iter().any(|&c| c >= n_classes) {
            return Err(DattaError::Config("probe labels do not match the inputs".into()));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        scale.iter_mut().for_each(|s| *s = 1.0 / s.sqrt().max(1e-8));
        let mut probe = Self {
            mean,
            scale,
            weights: vec![vec![0.0; d + 1]; n_classes],
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..cfg.iterations {
            let mut grad = vec![vec![0.0; d + 1]; n_classes];
            for (row, &label) in xs.iter().zip(y) {
                let mut p = probe.logits_std(row);
                softmax(&mut p);
                for (c, g) in grad.iter_mut().enumerate() {
                    let err = p[c] - f64::from(u8::from(c == label));
                    for (gj, xj) in g.iter_mut().zip(row.iter().chain(std::iter::once(&1.0))) {
                        *gj += err * xj / n;
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                for (j, (wj, gj)) in w.iter_mut().zip(g).enumerate() {
                    let decay = if j < d { cfg.l2 * *wj } else { 0.0 };
                    *wj -= cfg.learning_rate * (gj + decay);
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits_std(&self, row: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w[..row.len()].iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + w[row.len()])
            .collect()
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let z = self.logits_std(&self.standardize(row));
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        x.iter().zip(y).filter(|(r, &c)| self.predict(r) == c).count() as f64 / x.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use rand::Rng;

    #[test]
    fn separates_linearly_separable_classes() {
        let mut rng = rng_for(1, &[]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            let centre = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)][c];
            x.push(vec![centre.0 + rng.random_range(-1.0..1.0), centre.1 + rng.random_range(-1.0..1.0), rng.random()]);
            y.push(c);
        }
        let probe = LinearProbe::fit(&x[..200], &y[..200], 3, &ProbeConfig::default()).unwrap();
        assert!(probe.accuracy(&x[200..], &y[200..]) > 0.97);
    }

    #[test]
    fn uninformative_features_stay_near_chance() {
        let mut rng = rng_for(2, &[]);
        let x: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.random(), rng.random()]).collect();
        let y: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let probe = LinearProbe::fit(&x[..200], &y[..200], 2, &ProbeConfig::default()).unwrap();
        assert!(probe.accuracy(&x[200..], &y[200..]) < 0.62);
    }
}
