//! Feature extractor (convolutional stem, Gaussian positional encoding,
//! class token, transformer encoder), activity recognizer and domain
//! discriminator.

mod checkpoint;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::data::{CsiSample, MAX_LEN, N_ACTIVITIES, N_SUBCARRIERS};
use crate::error::{DattaError, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE};
pub use params::{Param, ParamGroup, ParamId, ParamStore};

pub const ENCODER_LAYERS: usize = 4;
const LN_EPS: f64 = 1e-5;

/// What the domain discriminator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorInput {
    /// Class-token embedding only.
    #[default]
    ClassToken,
    /// Class-token embedding concatenated with the activity logits.
    ClassTokenAndLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_encoder_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    /// Hidden width of both classification heads.
    pub head_hidden: usize,
    pub n_activities: usize,
    pub n_domains: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub discriminator_input: DiscriminatorInput,
    pub target_param_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            n_encoder_layers: ENCODER_LAYERS,
            n_heads: 4,
            mlp_hidden: 64,
            head_hidden: 32,
            n_activities: N_ACTIVITIES,
            n_domains: 7,
            stem_kernel: 8,
            stem_stride: 4,
            discriminator_input: DiscriminatorInput::ClassToken,
            target_param_count: 40_800,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DattaError::Config(m));
        if self.n_encoder_layers != ENCODER_LAYERS {
            return bad(format!("n_encoder_layers must be {ENCODER_LAYERS}"));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.mlp_hidden == 0 || self.head_hidden == 0 || self.n_activities == 0 || self.n_domains == 0 {
            return bad("widths and class counts must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 || self.stem_kernel > MAX_LEN {
            return bad("stem kernel and stride must be positive and fit the input".into());
        }
        Ok(())
    }

    /// Tokens produced by the stem, excluding the class token.
    pub fn n_patches(&self) -> usize {
        (MAX_LEN - self.stem_kernel) / self.stem_stride + 1
    }

    /// Rows of every encoder feature map (patches plus class token).
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderIds {
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct LayoutIds {
    stem_w: ParamId,
    stem_b: ParamId,
    pos_centre: ParamId,
    pos_log_width: ParamId,
    class_token: ParamId,
    encoder: Vec<EncoderIds>,
    activity: HeadIds,
    domain: HeadIds,
}

/// The full network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: LayoutIds,
    patch_index: Vec<usize>,
}

/// Parameters placed on a graph by [`Model::bind`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Graph nodes produced by a forward pass.
#[derive(Debug, Clone)]
pub struct FeatureVars {
    /// Output of encoder layers `1..=depth`, each `n_tokens × embed_dim`.
    pub layers: Vec<Var>,
    /// Class-token row of the last encoder layer, when all layers ran.
    pub class_token: Option<Var>,
}

/// Concrete feature maps of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps<T> {
    pub class_token: Tensor<T>,
    pub layers: Vec<Tensor<T>>,
}

fn linear_init<T: Scalar>(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; initialization is a function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x4d4f_4445]);
        let e = config.embed_dim;
        let mut p = ParamStore::new();
        let fan_stem = N_SUBCARRIERS * config.stem_kernel;

        let stem_w = p.add("stem.weight", ParamGroup::Embedding, linear_init(&mut rng, fan_stem, fan_stem, e));
        let stem_b = p.add("stem.bias", ParamGroup::Embedding, linear_init(&mut rng, fan_stem, 1, e));
        let centres = (0..e).map(|d| T::of((d as f64 + 0.5) / e as f64)).collect();
        let pos_centre = p.add("pos.centre", ParamGroup::Embedding, Tensor::row_vector(centres));
        let pos_log_width = p.add(
            "pos.log_width",
            ParamGroup::Embedding,
            Tensor::filled(1, e, T::of((1.0 / e as f64).max(0.05).ln())),
        );
        let cls = (0..e).map(|_| T::of(rng.random_range(-0.1..0.1))).collect();
        let class_token = p.add("class_token", ParamGroup::Embedding, Tensor::row_vector(cls));

        let mut encoder = Vec::with_capacity(config.n_encoder_layers);
        for l in 1..=config.n_encoder_layers {
            let g = ParamGroup::Encoder(l);
            let h = config.mlp_hidden;
            encoder.push(EncoderIds {
                w_qkv: p.add(format!("encoder.{l}.attn.w_qkv"), g, linear_init(&mut rng, e, e, 3 * e)),
                b_qkv: p.add(format!("encoder.{l}.attn.b_qkv"), g, Tensor::zeros(1, 3 * e)),
                w_out: p.add(format!("encoder.{l}.attn.w_out"), g, linear_init(&mut rng, e, e, e)),
                b_out: p.add(format!("encoder.{l}.attn.b_out"), g, Tensor::zeros(1, e)),
                ln1_gain: p.add(format!("encoder.{l}.ln1.gain"), g, Tensor::filled(1, e, T::one())),
                ln1_bias: p.add(format!("encoder.{l}.ln1.bias"), g, Tensor::zeros(1, e)),
                w_ff1: p.add(format!("encoder.{l}.ff.w1"), g, linear_init(&mut rng, e, e, h)),
                b_ff1: p.add(format!("encoder.{l}.ff.b1"), g, linear_init(&mut rng, e, 1, h)),
                w_ff2: p.add(format!("encoder.{l}.ff.w2"), g, linear_init(&mut rng, h, h, e)),
                b_ff2: p.add(format!("encoder.{l}.ff.b2"), g, linear_init(&mut rng, h, 1, e)),
                ln2_gain: p.add(format!("encoder.{l}.ln2.gain"), g, Tensor::filled(1, e, T::one())),
                ln2_bias: p.add(format!("encoder.{l}.ln2.bias"), g, Tensor::zeros(1, e)),
            });
        }

        let mut head = |prefix: &str, group: ParamGroup, inputs: usize, outputs: usize| {
            let hh = config.head_hidden;
            HeadIds {
                w1: p.add(format!("{prefix}.fc1.weight"), group, linear_init(&mut rng, inputs, inputs, hh)),
                b1: p.add(format!("{prefix}.fc1.bias"), group, linear_init(&mut rng, inputs, 1, hh)),
                w2: p.add(format!("{prefix}.fc2.weight"), group, linear_init(&mut rng, hh, hh, outputs)),
                b2: p.add(format!("{prefix}.fc2.bias"), group, linear_init(&mut rng, hh, 1, outputs)),
            }
        };
        let activity = head("activity", ParamGroup::ActivityHead, e, config.n_activities);
        let domain_inputs = match config.discriminator_input {
            DiscriminatorInput::ClassToken => e,
            DiscriminatorInput::ClassTokenAndLogits => e + config.n_activities,
        };
        let domain = head("domain", ParamGroup::DomainHead, domain_inputs, config.n_domains);

        let patch_index = patch_index(&config);
        Ok(Self {
            config,
            params: p,
            ids: LayoutIds {
                stem_w,
                stem_b,
                pos_centre,
                pos_log_width,
                class_token,
                encoder,
                activity,
                domain,
            },
            patch_index,
        })
    }

    /// Rebuilds a model around loaded parameters.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.check_compatible(&params)?;
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameters used at inference: everything but the domain discriminator.
    pub fn inference_param_count(&self) -> usize {
        self.params.scalar_count_where(|p| p.group != ParamGroup::DomainHead)
    }

    pub fn total_param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Sets the output layers of both heads to zero, making every
    /// prediction uniform.
    pub fn zero_head_outputs(&mut self) {
        for id in [self.ids.activity.w2, self.ids.activity.b2, self.ids.domain.w2, self.ids.domain.b2] {
            self.params.value_mut(id).data_mut().fill(T::zero());
        }
    }

    /// Places every parameter on `g`; `trainable` decides which ones
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&Param<T>) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, p)| g.leaf(p.value.clone(), trainable(p)))
            .collect();
        Bound { vars }
    }

    fn linear(&self, g: &mut Graph<T>, b: &Bound, x: Var, w: ParamId, bias: ParamId) -> Var {
        let y = g.matmul(x, b.var(w));
        g.add_row(y, b.var(bias))
    }

    /// Stem, positional encoding and class token: `n_tokens × embed_dim`.
    pub fn embed(&self, g: &mut Graph<T>, b: &Bound, input: Var) -> Var {
        let n = self.config.n_patches();
        let e = self.config.embed_dim;
        let patches = g.gather(input, self.patch_index.clone(), n, N_SUBCARRIERS * self.config.stem_kernel);
        let tokens = self.linear(g, b, patches, self.ids.stem_w, self.ids.stem_b);

        // PE[t, d] = exp(-½ ((pos_t - centre_d) / width_d)²)
        let denom = (n.max(2) - 1) as f64;
        let mut pos = Tensor::zeros(n, e);
        for t in 0..n {
            for d in 0..e {
                pos.set(t, d, T::of(t as f64 / denom));
            }
        }
        let pos = g.constant(pos);
        let diff = g.sub_row(pos, b.var(self.ids.pos_centre));
        let neg_log_w = g.scale(b.var(self.ids.pos_log_width), -T::one());
        let inv_w = g.exp(neg_log_w);
        let z = g.mul_row(diff, inv_w);
        let z2 = g.mul(z, z);
        let expo = g.scale(z2, T::of(-0.5));
        let pe = g.exp(expo);
        let tokens = g.add(tokens, pe);
        g.concat_rows(&[b.var(self.ids.class_token), tokens])
    }

    /// Post-norm transformer encoder layer `layer` (1-based).
    pub fn encoder_layer(&self, g: &mut Graph<T>, b: &Bound, layer: usize, x: Var) -> Var {
        let ids = &self.ids.encoder[layer - 1];
        let e = self.config.embed_dim;
        let heads = self.config.n_heads;
        let dh = e / heads;
        let qkv = self.linear(g, b, x, ids.w_qkv, ids.b_qkv);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, e + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * e + h * dh, dh);
            let scores = g.matmul_nt(q, k);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, v));
        }
        let heads_out = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let attn_out = self.linear(g, b, heads_out, ids.w_out, ids.b_out);
        let res1 = g.add(x, attn_out);
        let eps = T::of(LN_EPS);
        let x1 = g.layer_norm(res1, b.var(ids.ln1_gain), b.var(ids.ln1_bias), eps);
        let hidden = self.linear(g, b, x1, ids.w_ff1, ids.b_ff1);
        let hidden = g.relu(hidden);
        let ff = self.linear(g, b, hidden, ids.w_ff2, ids.b_ff2);
        let res2 = g.add(x1, ff);
        g.layer_norm(res2, b.var(ids.ln2_gain), b.var(ids.ln2_bias), eps)
    }

    /// Runs the feature extractor through encoder layers `1..=depth`.
    pub fn features(&self, g: &mut Graph<T>, b: &Bound, input: Var, depth: usize) -> FeatureVars {
        let depth = depth.min(self.config.n_encoder_layers);
        let mut x = self.embed(g, b, input);
        let mut layers = Vec::with_capacity(depth);
        for l in 1..=depth {
            x = self.encoder_layer(g, b, l, x);
            layers.push(x);
        }
        let class_token = (depth == self.config.n_encoder_layers).then(|| g.slice_row(x, 0));
        FeatureVars { layers, class_token }
    }

    fn head(&self, g: &mut Graph<T>, b: &Bound, ids: &HeadIds, input: Var) -> Var {
        let h = self.linear(g, b, input, ids.w1, ids.b1);
        let h = g.relu(h);
        self.linear(g, b, h, ids.w2, ids.b2)
    }

    /// Activity logits `1 × n_activities`.
    pub fn activity_logits(&self, g: &mut Graph<T>, b: &Bound, class_token: Var) -> Var {
        self.head(g, b, &self.ids.activity, class_token)
    }

    /// Domain logits behind a gradient reversal node with strength `lambda`.
    /// `activity_logits` is used only by [`DiscriminatorInput::ClassTokenAndLogits`].
    pub fn domain_logits(&self, g: &mut Graph<T>, b: &Bound, class_token: Var, activity_logits: Var, lambda: T) -> Var {
        let input = match self.config.discriminator_input {
            DiscriminatorInput::ClassToken => class_token,
            DiscriminatorInput::ClassTokenAndLogits => g.concat_cols(&[class_token, activity_logits]),
        };
        let reversed = g.reverse_grad(input, lambda);
        self.head(g, b, &self.ids.domain, reversed)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != (N_SUBCARRIERS, MAX_LEN) {
            return Err(DattaError::Shape(format!(
                "input is {:?}, expected ({N_SUBCARRIERS}, {MAX_LEN})",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Eval-mode feature maps for a batch of `N_SUBCARRIERS × MAX_LEN` inputs.
    pub fn forward_features(&self, batch: &[Tensor<T>]) -> Result<Vec<FeatureMaps<T>>> {
        batch
            .iter()
            .map(|x| {
                self.check_input(x)?;
                let mut g = Graph::new();
                let b = self.bind(&mut g, |_| false);
                let input = g.constant(x.clone());
                let f = self.features(&mut g, &b, input, self.config.n_encoder_layers);
                let c = f.class_token.expect("full depth");
                Ok(FeatureMaps {
                    class_token: g.value(c).clone(),
                    layers: f.layers.iter().map(|&v| g.value(v).clone()).collect(),
                })
            })
            .collect()
    }

    /// Feature maps of encoder layers `1..=depth` for one sample.
    pub fn layer_features(&self, x: &Tensor<T>, depth: usize) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let input = g.constant(x.clone());
        let f = self.features(&mut g, &b, input, depth);
        Ok(f.layers.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Class-token embedding of one sample.
    pub fn class_token(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_features(std::slice::from_ref(x))?.remove(0).class_token)
    }

    /// Activity probabilities `1 × n_activities` for one input.
    pub fn activity_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let input = g.constant(x.clone());
        let f = self.features(&mut g, &b, input, self.config.n_encoder_layers);
        let logits = self.activity_logits(&mut g, &b, f.class_token.expect("full depth"));
        let probs = g.softmax_rows(logits);
        Ok(g.value(probs).clone())
    }

    /// Domain probabilities `1 × n_domains` for one input.
    pub fn domain_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let input = g.constant(x.clone());
        let f = self.features(&mut g, &b, input, self.config.n_encoder_layers);
        let c = f.class_token.expect("full depth");
        let a = self.activity_logits(&mut g, &b, c);
        let d = self.domain_logits(&mut g, &b, c, a, T::zero());
        let probs = g.softmax_rows(d);
        Ok(g.value(probs).clone())
    }

    /// Arg-max activity for one sample.
    pub fn predict(&self, sample: &CsiSample) -> Result<usize> {
        Ok(argmax(self.activity_probs(&sample.to_tensor())?.data()))
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// im2col indices: patch `t`, column `f * kernel + j` reads input `(f, t * stride + j)`.
fn patch_index(cfg: &ModelConfig) -> Vec<usize> {
    let n = cfg.n_patches();
    let k = cfg.stem_kernel;
    let mut idx = Vec::with_capacity(n * N_SUBCARRIERS * k);
    for t in 0..n {
        for f in 0..N_SUBCARRIERS {
            for j in 0..k {
                idx.push(f * MAX_LEN + t * cfg.stem_stride + j);
            }
        }
    }
    idx
}
