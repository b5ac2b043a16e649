//! Online test-time adaptation: the feature statistics of each incoming
//! sample are folded into exponential moving averages, which are pulled
//! towards the source statistics by gradient steps on the early layers.
//! Random weight resets keep the adapted weights close to the source model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::CsiSample;
use crate::error::{DattaError, Result};
use crate::model::{argmax, Model, Param, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::train::{first_row, sgd_step, LayerStats, SourceStatistics};

/// Norm used to compare target and source statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentNorm {
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    /// Encoder layers (1-based) whose statistics are aligned.
    pub layer_ids: Vec<usize>,
    /// Weight of the newest sample in the moving averages.
    pub ema_alpha: f64,
    pub tta_learning_rate: f64,
    pub reset_rate: f64,
    pub steps_per_sample: usize,
    /// Whether stem, positional encoding and class token are adapted.
    pub include_embedding: bool,
    pub norm: AlignmentNorm,
    pub rng_seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            layer_ids: vec![1],
            ema_alpha: 0.1,
            tta_learning_rate: 1e-6,
            reset_rate: 1e-4,
            steps_per_sample: 1,
            include_embedding: true,
            norm: AlignmentNorm::L2,
            rng_seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layer_ids.is_empty() || self.layer_ids.iter().any(|&l| l == 0 || l > n_layers) {
            return Err(DattaError::Config(format!("layer_ids {:?} must be a non-empty subset of 1..={n_layers}", self.layer_ids)));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(DattaError::Config("ema_alpha must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.reset_rate) {
            return Err(DattaError::Config("reset_rate must lie in [0, 1]".into()));
        }
        if !(self.tta_learning_rate >= 0.0) || self.steps_per_sample == 0 {
            return Err(DattaError::Config("tta_learning_rate must be non-negative and steps_per_sample positive".into()));
        }
        Ok(())
    }

    /// Highest adapted encoder layer.
    pub fn depth(&self) -> usize {
        self.layer_ids.iter().copied().max().unwrap_or(0)
    }

    /// Whether `p` is updated during adaptation.
    pub fn in_scope<T>(&self, p: &Param<T>) -> bool {
        match p.group {
            ParamGroup::Embedding => self.include_embedding,
            ParamGroup::Encoder(l) => l <= self.depth(),
            ParamGroup::ActivityHead | ParamGroup::DomainHead => false,
        }
    }
}

/// `α·sample + (1 − α)·previous`, entry-wise.
pub fn ema_update<T: Scalar>(previous: &LayerStats<T>, sample: &LayerStats<T>, ema_alpha: T) -> LayerStats<T> {
    let blend = |p: &Tensor<T>, s: &Tensor<T>| {
        let data = p
            .data()
            .iter()
            .zip(s.data())
            .map(|(&p, &s)| ema_alpha * s + (T::one() - ema_alpha) * p)
            .collect();
        Tensor::from_vec(p.rows(), p.cols(), data).expect("same shape")
    };
    LayerStats {
        mean: blend(&previous.mean, &sample.mean),
        var: blend(&previous.var, &sample.var),
    }
}

/// Token mean and population variance of one feature map.
pub fn sample_statistics<T: Scalar>(map: &Tensor<T>, include_class_token: bool) -> LayerStats<T> {
    let skip = first_row(include_class_token);
    let n = T::of((map.rows() - skip) as f64);
    let mut mean = vec![T::zero(); map.cols()];
    for r in skip..map.rows() {
        for (m, &v) in mean.iter_mut().zip(map.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); map.cols()];
    for r in skip..map.rows() {
        for ((s, &v), &m) in var.iter_mut().zip(map.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    LayerStats {
        mean: Tensor::row_vector(mean),
        var: Tensor::row_vector(var),
    }
}

fn norm_of<T: Scalar>(v: impl Iterator<Item = T>, norm: AlignmentNorm) -> T {
    match norm {
        AlignmentNorm::L2 => v.map(|x| x * x).sum::<T>().sqrt(),
        AlignmentNorm::L1 => v.map(|x| x.abs()).sum(),
    }
}

/// `Σ_l ‖μ̂_l − μ̄_l‖ + ‖σ̂²_l − σ̄²_l‖` over the layers in `estimates`.
pub fn alignment_loss<T: Scalar>(
    estimates: &BTreeMap<usize, LayerStats<T>>,
    source: &SourceStatistics<T>,
    norm: AlignmentNorm,
) -> Result<T> {
    let mut total = T::zero();
    for (l, est) in estimates {
        let src = source
            .layer(*l)
            .ok_or_else(|| DattaError::Config(format!("no source statistics for layer {l}")))?;
        let diff = |a: &Tensor<T>, b: &Tensor<T>| -> Result<T> {
            if a.shape() != b.shape() {
                return Err(DattaError::Shape(format!("layer {l}: statistics {:?} vs {:?}", a.shape(), b.shape())));
            }
            Ok(norm_of(a.data().iter().zip(b.data()).map(|(&x, &y)| x - y), norm))
        };
        total += diff(&est.mean, &src.mean)? + diff(&est.var, &src.var)?;
    }
    Ok(total)
}

/// Resets each in-scope scalar to its `source` value with probability `p`.
/// Returns the number of reset positions.
pub fn weight_reset<T: Scalar>(
    params: &mut ParamStore<T>,
    source: &ParamStore<T>,
    p: f64,
    in_scope: impl Fn(&Param<T>) -> bool,
    rng: &mut impl Rng,
) -> Result<usize> {
    params.check_compatible(source)?;
    if p <= 0.0 {
        return Ok(0);
    }
    let mut count = 0;
    for ((_, param), (_, src)) in params.iter_mut().zip(source.iter()) {
        if !in_scope(param) {
            continue;
        }
        for (v, &s) in param.value.data_mut().iter_mut().zip(src.value.data()) {
            if rng.random_bool(p) {
                *v = s;
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Mutable state of one adaptation stream.
#[derive(Debug, Clone)]
pub struct AdaptationState<T> {
    /// Moving-average estimates per adapted layer.
    pub ema: BTreeMap<usize, LayerStats<T>>,
    /// Parameters of the source model.
    pub source_params: ParamStore<T>,
    /// Samples processed so far.
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> AdaptationState<T> {
    /// Starts the estimates at the source statistics.
    pub fn new(source: &SourceStatistics<T>, layer_ids: &[usize], source_params: ParamStore<T>, seed: u64) -> Result<Self> {
        let mut ema = BTreeMap::new();
        for &l in layer_ids {
            let s = source
                .layer(l)
                .ok_or_else(|| DattaError::Config(format!("no source statistics for layer {l}")))?;
            ema.insert(l, s.clone());
        }
        Ok(Self {
            ema,
            source_params,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5454_4121])),
        })
    }

    /// Folds one sample's statistics into every tracked layer.
    pub fn update(&mut self, sample: &BTreeMap<usize, LayerStats<T>>, ema_alpha: T) {
        for (l, est) in self.ema.iter_mut() {
            if let Some(s) = sample.get(l) {
                *est = ema_update(est, s, ema_alpha);
            }
        }
    }
}

/// Result of adapting on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub prediction: usize,
    /// Alignment loss before the gradient step.
    pub loss: f64,
    /// `‖θ − θ̄‖₂` after the step and reset.
    pub drift: f64,
    pub resets: usize,
    /// The loss or its gradient was not finite and no update was made.
    pub skipped: bool,
}

struct AlignmentGraph<T> {
    graph: Graph<T>,
    loss: Var,
    estimates: BTreeMap<usize, (Var, Var)>,
    params: Vec<Var>,
}

/// A model that adapts itself to the stream it is predicting on.
#[derive(Debug, Clone)]
pub struct Adaptor<T> {
    model: Model<T>,
    source: SourceStatistics<T>,
    cfg: AdaptationConfig,
    state: AdaptationState<T>,
}

impl<T: Scalar> Adaptor<T> {
    pub fn new(model: Model<T>, source: SourceStatistics<T>, cfg: AdaptationConfig) -> Result<Self> {
        cfg.validate(model.config().n_encoder_layers)?;
        let state = AdaptationState::new(&source, &cfg.layer_ids, model.params().clone(), cfg.rng_seed)?;
        for l in &cfg.layer_ids {
            let width = source.layers[l].mean.cols();
            if width != model.config().embed_dim {
                return Err(DattaError::Shape(format!("layer {l} statistics have width {width}")));
            }
        }
        Ok(Self { model, source, cfg, state })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.cfg
    }

    pub fn state(&self) -> &AdaptationState<T> {
        &self.state
    }

    pub fn source_statistics(&self) -> &SourceStatistics<T> {
        &self.source
    }

    /// `‖θ − θ̄‖₂`
    pub fn drift(&self) -> T {
        self.model.params().distance(&self.state.source_params)
    }

    fn build_graph(&self, x: &Tensor<T>) -> AlignmentGraph<T> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, |p| self.cfg.in_scope(p));
        let input = g.constant(x.clone());
        let f = self.model.features(&mut g, &b, input, self.cfg.depth());
        let a = T::of(self.cfg.ema_alpha);
        let include_cls = self.source.include_class_token;
        let mut estimates = BTreeMap::new();
        let mut terms = Vec::new();
        for (&l, prev) in &self.state.ema {
            let mut phi = f.layers[l - 1];
            if !include_cls {
                let (rows, cols) = g.value(phi).shape();
                phi = g.gather(phi, (cols..rows * cols).collect(), rows - 1, cols);
            }
            let mu = g.mean_rows(phi);
            let centred = g.sub_row(phi, mu);
            let sq = g.mul(centred, centred);
            let var = g.mean_rows(sq);
            let src = &self.source.layers[&l];
            let mut blend = |g: &mut Graph<T>, cur: Var, prev: &Tensor<T>, target: &Tensor<T>| {
                let scaled = g.scale(cur, a);
                let history = g.constant(prev.map(|v| (T::one() - a) * v));
                let est = g.add(scaled, history);
                let target = g.constant(target.clone());
                let d = g.sub(est, target);
                let n = match self.cfg.norm {
                    AlignmentNorm::L2 => g.l2_norm(d),
                    AlignmentNorm::L1 => g.l1_norm(d),
                };
                terms.push(n);
                est
            };
            let mu_hat = blend(&mut g, mu, &prev.mean, &src.mean);
            let var_hat = blend(&mut g, var, &prev.var, &src.var);
            estimates.insert(l, (mu_hat, var_hat));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t);
        }
        let params = self.model.params().iter().map(|(id, _)| b.var(id)).collect();
        AlignmentGraph {
            graph: g,
            loss,
            estimates,
            params,
        }
    }

    /// Alignment loss the next sample would incur, without adapting.
    pub fn alignment_loss(&self, sample: &CsiSample) -> Result<T> {
        let ag = self.build_graph(&sample.to_tensor());
        Ok(ag.graph.value(ag.loss).item())
    }

    /// Adapts on `sample` and predicts its activity with the updated model.
    /// Labels of `sample` are not read.
    pub fn adapt_step(&mut self, sample: &CsiSample) -> Result<StepOutcome> {
        let x = sample.to_tensor::<T>();
        if x.shape() != (crate::data::N_SUBCARRIERS, crate::data::MAX_LEN) {
            return Err(DattaError::Shape(format!("sample `{}` has shape {:?}", sample.sample_id, x.shape())));
        }
        let lr = T::of(self.cfg.tta_learning_rate);
        let mut first_loss = None;
        let mut new_estimates = None;
        let mut skipped = false;
        for _ in 0..self.cfg.steps_per_sample {
            let ag = self.build_graph(&x);
            let loss = ag.graph.value(ag.loss).item();
            let mut grads = ag.graph.backward(ag.loss);
            let grads: Vec<Option<Tensor<T>>> = ag.params.iter().map(|&v| grads.take(v)).collect();
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.all_finite()) {
                log::warn!("non-finite alignment loss on sample `{}`; update skipped", sample.sample_id);
                skipped = true;
                break;
            }
            if first_loss.is_none() {
                first_loss = Some(loss.as_f64());
                new_estimates = Some(
                    ag.estimates
                        .iter()
                        .map(|(&l, &(m, v))| {
                            let stats = LayerStats {
                                mean: ag.graph.value(m).clone(),
                                var: ag.graph.value(v).clone(),
                            };
                            (l, stats)
                        })
                        .collect::<BTreeMap<_, _>>(),
                );
            }
            sgd_step(self.model.params_mut(), &grads, lr);
        }
        if !skipped {
            if let Some(est) = new_estimates {
                self.state.ema = est;
            }
        }

        let cfg = &self.cfg;
        let resets = weight_reset(
            self.model.params_mut(),
            &self.state.source_params,
            cfg.reset_rate,
            |p| cfg.in_scope(p),
            &mut self.state.rng,
        )?;
        self.state.step += 1;
        let probs = self.model.activity_probs(&x)?;
        Ok(StepOutcome {
            prediction: argmax(probs.data()),
            loss: first_loss.unwrap_or(f64::NAN),
            drift: self.drift().as_f64(),
            resets,
            skipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_domain, PatternGenerator, SplitName, SyntheticDomainSpec};
    use crate::model::ModelConfig;
    use crate::seed::rng_for;
    use crate::train::compute_source_statistics;
    use proptest::prelude::*;

    fn stats(mean: Vec<f64>, var: Vec<f64>) -> LayerStats<f64> {
        LayerStats {
            mean: Tensor::row_vector(mean),
            var: Tensor::row_vector(var),
        }
    }

    fn source(mean: Vec<f64>, var: Vec<f64>) -> SourceStatistics<f64> {
        SourceStatistics {
            layers: BTreeMap::from([(1, stats(mean, var))]),
            include_class_token: true,
        }
    }

    #[test]
    fn ema_recursion_examples() {
        let prev = stats(vec![1.0], vec![0.5]);
        let next = ema_update(&prev, &stats(vec![2.0], vec![1.5]), 0.1);
        assert!((next.mean.item() - 1.1).abs() < 1e-12);
        assert!((next.var.item() - 0.6).abs() < 1e-12);
        let sample = stats(vec![-3.0, 4.0], vec![0.1, 0.2]);
        assert_eq!(ema_update(&stats(vec![9.0, 9.0], vec![9.0, 9.0]), &sample, 1.0), sample);
        let fixed = stats(vec![0.3, 0.7], vec![1.0, 2.0]);
        let mut est = fixed.clone();
        for _ in 0..50 {
            est = ema_update(&est, &fixed, 0.1);
        }
        for (a, b) in est.mean.data().iter().chain(est.var.data()).zip(fixed.mean.data().iter().chain(fixed.var.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ema_matches_the_closed_form_weighted_sum(
            alpha in 0.01f64..=1.0,
            start in -5.0f64..5.0,
            seq in prop::collection::vec(-5.0f64..5.0, 10),
        ) {
            let mut est = stats(vec![start], vec![start.abs()]);
            for &s in &seq {
                est = ema_update(&est, &stats(vec![s], vec![s.abs()]), alpha);
            }
            let i = seq.len() as i32;
            let closed = |f: fn(f64) -> f64| {
                alpha * seq.iter().enumerate().map(|(j, &s)| (1.0 - alpha).powi(i - 1 - j as i32) * f(s)).sum::<f64>()
                    + (1.0 - alpha).powi(i) * f(start)
            };
            prop_assert!((est.mean.item() - closed(|x| x)).abs() < 1e-6);
            prop_assert!((est.var.item() - closed(f64::abs)).abs() < 1e-6);
        }

        #[test]
        fn reset_only_yields_current_or_source_values(
            cur in prop::collection::vec(-1.0f64..1.0, 64),
            src in prop::collection::vec(-1.0f64..1.0, 64),
            p in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let mut params = store(cur.clone());
            weight_reset(&mut params, &store(src.clone()), p, |_| true, &mut rng_for(seed, &[])).unwrap();
            for ((&v, &a), &b) in params.iter().next().unwrap().1.value.data().iter().zip(&cur).zip(&src) {
                prop_assert!(v == a || v == b);
            }
        }
    }

    #[test]
    fn alignment_loss_is_a_sum_of_norms() {
        let src = source(vec![0.0, 0.0], vec![1.0, 1.0]);
        let est = |m: Vec<f64>| BTreeMap::from([(1, stats(m, vec![1.0, 1.0]))]);
        assert_eq!(alignment_loss(&est(vec![0.0, 0.0]), &src, AlignmentNorm::L2).unwrap(), 0.0);
        assert!((alignment_loss(&est(vec![3.0, 4.0]), &src, AlignmentNorm::L2).unwrap() - 5.0).abs() < 1e-12);
        assert!((alignment_loss(&est(vec![6.0, 8.0]), &src, AlignmentNorm::L2).unwrap() - 10.0).abs() < 1e-12);
        assert!((alignment_loss(&est(vec![3.0, -4.0]), &src, AlignmentNorm::L1).unwrap() - 7.0).abs() < 1e-12);
        let both = BTreeMap::from([(1, stats(vec![3.0, 4.0], vec![1.0, 2.0]))]);
        assert!((alignment_loss(&both, &src, AlignmentNorm::L2).unwrap() - 6.0).abs() < 1e-12);
    }

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Encoder(1), Tensor::row_vector(values));
        s
    }

    #[test]
    fn reset_extremes() {
        let cur = store(vec![1.0; 100]);
        let src = store(vec![2.0; 100]);
        let mut p = cur.clone();
        assert_eq!(weight_reset(&mut p, &src, 0.0, |_| true, &mut rng_for(0, &[])).unwrap(), 0);
        assert_eq!(p, cur);
        assert_eq!(weight_reset(&mut p, &src, 1.0, |_| true, &mut rng_for(0, &[])).unwrap(), 100);
        assert_eq!(p, src);
    }

    #[test]
    fn half_reset_count_lies_in_the_binomial_band() {
        for seed in 0..20 {
            let mut p = store(vec![1.0; 10_000]);
            let n = weight_reset(&mut p, &store(vec![0.0; 10_000]), 0.5, |_| true, &mut rng_for(seed, &[])).unwrap();
            assert!((4800..=5200).contains(&n), "seed {seed}: {n}");
            let zeros = p.iter().next().unwrap().1.value.data().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, n);
        }
    }

    #[test]
    fn reset_respects_scope_and_shapes() {
        let mut p = store(vec![1.0; 10]);
        assert_eq!(weight_reset(&mut p, &store(vec![0.0; 10]), 1.0, |_| false, &mut rng_for(0, &[])).unwrap(), 0);
        assert!(matches!(
            weight_reset(&mut p, &store(vec![0.0; 11]), 0.5, |_| true, &mut rng_for(0, &[])),
            Err(DattaError::ShapeMismatch { .. })
        ));
    }

    fn tiny() -> (Model<f64>, SourceStatistics<f64>, Vec<CsiSample>) {
        let cfg = ModelConfig {
            embed_dim: 8,
            n_heads: 2,
            mlp_hidden: 8,
            head_hidden: 8,
            n_activities: 2,
            n_domains: 2,
            stem_kernel: 20,
            stem_stride: 20,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 7).unwrap();
        let generator = PatternGenerator::default();
        let train = synthesize_domain(&SyntheticDomainSpec::clean(0, 1), 6, &generator, SplitName::Train).unwrap();
        let stats = compute_source_statistics(&model, &train.samples, &[1, 2, 3, 4], true).unwrap();
        let shifted = SyntheticDomainSpec {
            subcarrier_response: (0..30).map(|f| 1.0 + 0.05 * f as f32).collect(),
            noise_sigma: 0.02,
            ..SyntheticDomainSpec::clean(1, 2)
        };
        let stream = synthesize_domain(&shifted, 12, &generator, SplitName::Test).unwrap().samples;
        (model, stats, stream)
    }

    #[test]
    fn state_starts_at_the_source_statistics() {
        let (model, stats, _) = tiny();
        let a = Adaptor::new(model, stats.clone(), AdaptationConfig { layer_ids: vec![1, 3], ..Default::default() }).unwrap();
        assert_eq!(a.state().ema[&1], stats.layers[&1]);
        assert_eq!(a.state().ema[&3], stats.layers[&3]);
        assert_eq!(a.state().step, 0);
        assert_eq!(a.drift(), 0.0);
    }

    #[test]
    fn disabled_adaptation_matches_the_frozen_model() {
        let (model, stats, stream) = tiny();
        let cfg = AdaptationConfig {
            tta_learning_rate: 0.0,
            reset_rate: 0.0,
            ..Default::default()
        };
        let mut a = Adaptor::new(model.clone(), stats, cfg).unwrap();
        for s in &stream {
            let out = a.adapt_step(s).unwrap();
            assert_eq!(out.prediction, model.predict(s).unwrap());
            assert_eq!(out.drift, 0.0);
        }
        assert_eq!(a.model(), &model);
        assert_eq!(a.state().step, stream.len() as u64);
    }

    #[test]
    fn parameters_outside_the_scope_stay_bit_identical() {
        let (model, stats, stream) = tiny();
        for include_embedding in [true, false] {
            let cfg = AdaptationConfig {
                tta_learning_rate: 1e-2,
                reset_rate: 0.1,
                layer_ids: vec![2],
                include_embedding,
                ..Default::default()
            };
            let mut a = Adaptor::new(model.clone(), stats.clone(), cfg.clone()).unwrap();
            for s in &stream {
                a.adapt_step(s).unwrap();
            }
            assert!(a.drift() > 0.0);
            for ((_, before), (_, after)) in model.params().iter().zip(a.model().params().iter()) {
                if !cfg.in_scope(before) {
                    assert_eq!(before, after, "{}", before.name);
                }
            }
        }
    }

    #[test]
    fn adaptation_is_deterministic() {
        let (model, stats, stream) = tiny();
        let cfg = AdaptationConfig {
            tta_learning_rate: 1e-2,
            reset_rate: 0.05,
            rng_seed: 3,
            ..Default::default()
        };
        let run = || {
            let mut a = Adaptor::new(model.clone(), stats.clone(), cfg.clone()).unwrap();
            stream.iter().map(|s| a.adapt_step(s).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_steps_reduce_the_alignment_loss() {
        let (model, stats, stream) = tiny();
        let cfg = AdaptationConfig {
            tta_learning_rate: 1e-5,
            reset_rate: 0.0,
            ema_alpha: 1.0,
            ..Default::default()
        };
        let mut a = Adaptor::new(model, stats, cfg).unwrap();
        let s = &stream[0];
        let before = a.alignment_loss(s).unwrap();
        let out = a.adapt_step(s).unwrap();
        assert!((out.loss - before).abs() < 1e-12);
        let after = a.alignment_loss(s).unwrap();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let (model, stats, stream) = tiny();
        let cfg = AdaptationConfig {
            layer_ids: vec![1, 2],
            ema_alpha: 0.3,
            ..Default::default()
        };
        let x = stream[1].to_tensor::<f64>();
        let a = Adaptor::new(model.clone(), stats.clone(), cfg.clone()).unwrap();
        let ag = a.build_graph(&x);
        let grads = ag.graph.backward(ag.loss);
        let h = 1e-6;
        for name in ["stem.weight", "pos.log_width", "encoder.2.attn.w_qkv", "encoder.1.ln2.gain"] {
            let id = model.params().find(name).unwrap();
            let analytic = grads.get(ag.params[id.index()]).unwrap().data()[1];
            let loss_at = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().value_mut(id).data_mut()[1] += delta;
                Adaptor::new(m, stats.clone(), cfg.clone()).unwrap().alignment_loss(&stream[1]).unwrap()
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            assert!((analytic - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{name}: {analytic} vs {fd}");
        }
        assert!(grads.get(ag.params[model.params().find("encoder.3.ff.w1").unwrap().index()]).is_none());
    }

    #[test]
    fn ema_state_tracks_pre_step_statistics() {
        let (model, stats, stream) = tiny();
        let cfg = AdaptationConfig {
            tta_learning_rate: 0.0,
            reset_rate: 0.0,
            ema_alpha: 0.25,
            ..Default::default()
        };
        let mut a = Adaptor::new(model.clone(), stats.clone(), cfg).unwrap();
        a.adapt_step(&stream[0]).unwrap();
        let maps = model.layer_features(&stream[0].to_tensor(), 1).unwrap();
        let expected = ema_update(&stats.layers[&1], &sample_statistics(&maps[0], true), 0.25);
        for (x, y) in a.state().ema[&1].mean.data().iter().zip(expected.mean.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.state().ema[&1].var.data().iter().zip(expected.var.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (model, stats, _) = tiny();
        for cfg in [
            AdaptationConfig { layer_ids: vec![], ..Default::default() },
            AdaptationConfig { layer_ids: vec![5], ..Default::default() },
            AdaptationConfig { ema_alpha: 0.0, ..Default::default() },
            AdaptationConfig { reset_rate: 1.5, ..Default::default() },
        ] {
            assert!(Adaptor::new(model.clone(), stats.clone(), cfg).is_err());
        }
    }
}
