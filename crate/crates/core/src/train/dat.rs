//! Domain-adversarial training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{ccc_node, cross_entropy_node, lambda_schedule, DEFAULT_PROB_EPS};
use super::optim::Adam;
use super::stats::{compute_source_statistics, SourceStatistics};
use crate::augment::{augment, AugmentConfig};
use crate::autodiff::Graph;
use crate::data::{CsiSample, DatasetSplit};
use crate::error::{DattaError, Result};
use crate::harness::macro_f1;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatConfig {
    /// Domain-loss weight.
    pub alpha: f64,
    /// Confidence-control weight.
    pub beta: f64,
    /// Scale of the adversarial strength schedule.
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub prob_clamp_eps: f64,
    pub rng_seed: u64,
    /// Encoder layers whose source statistics are stored after training.
    pub stats_layers: Vec<usize>,
    pub stats_include_class_token: bool,
    /// Keep the epoch with the best validation macro-F1 instead of the last.
    pub select_best_val: bool,
}

impl Default for DatConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.2,
            gamma: 8.0,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            prob_clamp_eps: DEFAULT_PROB_EPS,
            rng_seed: 0,
            stats_layers: vec![1, 2, 3, 4],
            stats_include_class_token: true,
            select_best_val: true,
        }
    }
}

impl DatConfig {
    /// Conventional training: no domain loss and no confidence control.
    pub fn baseline() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(DattaError::Config("alpha, beta and gamma must be non-negative".into()));
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps < 0.5) {
            return Err(DattaError::Config("prob_clamp_eps must lie in (0, 0.5)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(DattaError::Config("epochs, batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub activity_loss: f64,
    pub domain_loss: f64,
    pub ccc_loss: f64,
    pub lambda: f64,
    /// Set on the last step of an epoch when a validation split exists.
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub stats: SourceStatistics<T>,
    pub log: Vec<TrainLogEntry>,
    /// Original domain id to dense discriminator class.
    pub domain_map: BTreeMap<u16, usize>,
}

/// Loss terms and parameter gradients for one sample.
#[derive(Debug, Clone)]
pub struct SampleGradients<T> {
    pub loss: T,
    pub activity_loss: T,
    pub domain_loss: T,
    pub ccc_loss: T,
    pub grads: Vec<Option<Tensor<T>>>,
}

/// Weights applied to the loss terms of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights<T> {
    pub alpha: T,
    pub beta: T,
    pub lambda: T,
    pub eps: T,
    /// Multiplies the whole objective, e.g. `1 / batch_size`.
    pub scale: T,
}

/// Forward and backward pass of `scale · (L_a + α·L_d + β·L_c)` for one
/// input, with the gradient reversal of strength `lambda` in front of the
/// domain discriminator.
pub fn sample_gradients<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    activity: usize,
    domain: usize,
    w: LossWeights<T>,
) -> SampleGradients<T> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, |_| true);
    let x = g.constant(input.clone());
    let f = model.features(&mut g, &b, x, model.config().n_encoder_layers);
    let c = f.class_token.expect("full depth");
    let a_logits = model.activity_logits(&mut g, &b, c);
    let a_probs = g.softmax_rows(a_logits);
    let d_logits = model.domain_logits(&mut g, &b, c, a_logits, w.lambda);
    let d_probs = g.softmax_rows(d_logits);

    let la = cross_entropy_node(&mut g, a_probs, activity, w.eps);
    let ld = cross_entropy_node(&mut g, d_probs, domain, w.eps);
    let lc = ccc_node(&mut g, a_probs, w.eps);
    let wd = g.scale(ld, w.alpha);
    let wc = g.scale(lc, w.beta);
    let total = g.add(la, wd);
    let total = g.add(total, wc);
    let total = g.scale(total, w.scale);

    let mut grads = g.backward(total);
    let grads = model.params().iter().map(|(id, _)| grads.take(b.var(id))).collect();
    SampleGradients {
        loss: g.value(total).item() / w.scale,
        activity_loss: g.value(la).item(),
        domain_loss: g.value(ld).item(),
        ccc_loss: g.value(lc).item(),
        grads,
    }
}

/// Dense re-indexing of the domains present in `samples`.
pub fn domain_index(samples: &[CsiSample]) -> BTreeMap<u16, usize> {
    let mut ids: Vec<u16> = samples.iter().map(|s| s.domain).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, d)| (d, i)).collect()
}

/// Macro-F1 of a model's predictions on a split.
pub fn split_macro_f1<T: Scalar>(model: &Model<T>, split: &DatasetSplit) -> Result<f64> {
    let preds: Vec<usize> = split
        .samples
        .par_iter()
        .map(|s| model.predict(s))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = split.samples.iter().map(|s| s.activity as usize).collect();
    Ok(macro_f1(&truth, &preds))
}

/// Trains a model on `train` with the domain-adversarial objective, then
/// computes source statistics over the unaugmented training set.
///
/// `model_cfg.n_domains` is replaced by the number of training domains.
pub fn train_dat<T: Scalar>(
    train: &DatasetSplit,
    val: Option<&DatasetSplit>,
    model_cfg: &ModelConfig,
    cfg: &DatConfig,
    augment_cfg: &AugmentConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    augment_cfg.validate()?;
    if train.is_empty() {
        return Err(DattaError::EmptyDataset);
    }
    let domain_map = domain_index(&train.samples);
    let model_cfg = ModelConfig {
        n_domains: domain_map.len(),
        ..model_cfg.clone()
    };
    if let Some(s) = train.samples.iter().find(|s| s.activity as usize >= model_cfg.n_activities) {
        return Err(DattaError::Config(format!(
            "sample `{}` has activity {} but the model has {} classes",
            s.sample_id, s.activity, model_cfg.n_activities
        )));
    }

    let mut model = Model::<T>::new(model_cfg, cfg.rng_seed)?;
    let mut opt = Adam::new(model.params(), T::of(cfg.learning_rate));
    let n = train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let eps = T::of(cfg.prob_clamp_eps);

    let mut log = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, Model<T>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(cfg.rng_seed, &[0x5348_5546, epoch as u64]));
        let epoch_aug = AugmentConfig {
            rng_seed: derive_seed(augment_cfg.rng_seed, &[cfg.rng_seed, epoch as u64]),
            ..augment_cfg.clone()
        };

        for batch in order.chunks(cfg.batch_size) {
            let progress = step as f64 / total_steps as f64;
            let lambda = lambda_schedule(progress, cfg.gamma);
            let weights = LossWeights {
                alpha: T::of(cfg.alpha),
                beta: T::of(cfg.beta),
                lambda: T::of(lambda),
                eps,
                scale: T::one() / T::of(batch.len() as f64),
            };
            let results: Vec<SampleGradients<T>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train.samples[i];
                    let x = augment(s, &epoch_aug).to_tensor::<T>();
                    sample_gradients(&model, &x, s.activity as usize, domain_map[&s.domain], weights)
                })
                .collect();

            let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.params().len()];
            let (mut l, mut la, mut ld, mut lc) = (0.0, 0.0, 0.0, 0.0);
            for r in results {
                l += r.loss.as_f64();
                la += r.activity_loss.as_f64();
                ld += r.domain_loss.as_f64();
                lc += r.ccc_loss.as_f64();
                for (acc, g) in grads.iter_mut().zip(r.grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            let k = batch.len() as f64;
            if !l.is_finite() || grads.iter().flatten().any(|g| !g.all_finite()) {
                return Err(DattaError::NonFiniteLoss { step });
            }
            opt.step(model.params_mut(), &grads);
            log.push(TrainLogEntry {
                step,
                epoch,
                loss: l / k,
                activity_loss: la / k,
                domain_loss: ld / k,
                ccc_loss: lc / k,
                lambda,
                val_f1: None,
            });
            step += 1;
        }

        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let f1 = split_macro_f1(&model, val)?;
            if let Some(last) = log.last_mut() {
                last.val_f1 = Some(f1);
            }
            log::info!("epoch {epoch}: val macro-F1 {f1:.4}");
            if cfg.select_best_val && best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, model.clone()));
            }
        }
    }
    if let Some((_, m)) = best {
        model = m;
    }

    let stats = compute_source_statistics(&model, &train.samples, &cfg.stats_layers, cfg.stats_include_class_token)?;
    Ok(TrainOutcome {
        model,
        stats,
        log,
        domain_map,
    })
}
