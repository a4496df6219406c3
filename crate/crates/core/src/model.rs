//! Networks: the label-level embedding model and the pooled-feature baseline.
//!
//! Parameter names are stable and double as checkpoint keys:
//! `enc.conv{k}.{w,b}`, `U`, `attn.head{k}.{wq,wk,wv}`, `attn.wo`, `attn.wqp`,
//! `proj.{0,1}.{w,b}`, `cls.{j}.{w,b}` and, for the baseline, `head.{w,b}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_att_block_with_weights, MultiHeadParams};
use crate::data::derive_seed;
use crate::error::{shape_err, Error, Result};
use crate::params::{kaiming_uniform, normal, xavier_uniform, Bound, ParamId, ParamSet};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Added to the projection norm before dividing.
pub const PROJECTION_EPS: Real = 1e-12;

/// Convolutional encoder: 3×3 kernels, stride 2, padding 1, ReLU after every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels per layer; the last entry is the feature width `C`.
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, channels: vec![16, 32, 64, 64] }
    }
}

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    fn downsample(&self) -> usize {
        1 << self.channels.len()
    }

    /// Feature-map extents `(H/2^k, W/2^k)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.downsample(), self.width / self.downsample())
    }

    /// Number of spatial cells `WH` in the encoder output.
    pub fn cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.downsample();
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("encoder needs at least one layer with positive channels".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % k != 0 || self.width % k != 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Config(format!(
                "input {}×{} must be a positive multiple of 16 and of {k}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of labels `L`.
    pub labels: usize,
    pub encoder: EncoderConfig,
    /// Label-level embedding width `D`.
    pub embed_dim: usize,
    pub heads: usize,
    /// Projection width `d_z`.
    pub proj_dim: usize,
    pub scaled_attention: bool,
    /// Standard deviation of the class-embedding initialization.
    pub query_init_std: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            labels: 8,
            encoder: EncoderConfig::default(),
            embed_dim: 64,
            heads: 4,
            proj_dim: 32,
            scaled_attention: true,
            query_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Dimensions of the full-size setup (448×448 inputs, 2048-channel
    /// features, D = 1024). Not trainable at desk scale; kept for reference.
    pub fn paper_profile(labels: usize) -> Self {
        Self {
            labels,
            encoder: EncoderConfig { height: 448, width: 448, channels: vec![64, 256, 512, 1024, 2048] },
            embed_dim: 1024,
            heads: 4,
            proj_dim: 128,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.encoder.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.labels < 2 {
            return Err(Error::Config("need at least 2 labels".into()));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("D={} must be a positive multiple of h={}", self.embed_dim, self.heads)));
        }
        if self.proj_dim == 0 || !(self.query_init_std > 0.0) {
            return Err(Error::Config("projection width and query std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    convs: Vec<(ParamId, ParamId)>,
}

impl Encoder {
    pub fn init(store: &mut ParamSet, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (k, &cout) in config.channels.iter().enumerate() {
            let w = store.add(format!("enc.conv{k}.w"), kaiming_uniform(&[cout, cin, 3, 3], cin * 9, rng));
            let b = store.add(format!("enc.conv{k}.b"), Tensor::zeros(&[cout]));
            convs.push((w, b));
            cin = cout;
        }
        Self { config: config.clone(), convs }
    }

    /// `N × 3 × H × W` images to an `N × C × H/2^k × W/2^k` feature map.
    pub fn feature_map(&self, tape: &mut Tape, vars: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images);
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.height || s[3] != self.config.width {
            return shape_err(
                "encode",
                format!("images {s:?}, expected N×3×{}×{}", self.config.height, self.config.width),
            );
        }
        let mut h = images;
        for &(w, b) in &self.convs {
            h = tape.conv2d(h, vars[w], 2, 1)?;
            h = tape.add_channel_bias(h, vars[b])?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// Spatial features `r`: `N × WH × C`, one row per feature-map cell.
    pub fn encode(&self, tape: &mut Tape, vars: &Bound, images: Var) -> Result<Var> {
        let fm = self.feature_map(tape, vars, images)?;
        let s = tape.shape(fm).to_vec();
        let flat = tape.reshape(fm, &[s[0], s[1], s[2] * s[3]])?;
        tape.transpose(flat)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    layers: [(ParamId, ParamId); 2],
}

impl Projector {
    pub fn init(store: &mut ParamSet, input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w0 = store.add("proj.0.w", xavier_uniform(&[input, hidden], input, hidden, rng));
        let b0 = store.add("proj.0.b", Tensor::zeros(&[hidden]));
        let w1 = store.add("proj.1.w", xavier_uniform(&[hidden, output], hidden, output, rng));
        let b1 = store.add("proj.1.b", Tensor::zeros(&[output]));
        Self { layers: [(w0, b0), (w1, b1)] }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Applies both layers to the last axis and L2-normalizes each output row.
    pub fn forward(&self, tape: &mut Tape, vars: &Bound, x: Var) -> Result<Var> {
        let [(w0, b0), (w1, b1)] = self.layers;
        let h = tape.linear(x, vars[w0], Some(vars[b0]))?;
        let h = tape.relu(h)?;
        let z = tape.linear(h, vars[w1], Some(vars[b1]))?;
        tape.normalize_rows(z, PROJECTION_EPS)
    }
}

/// Forward-pass values of [`MulConModel`].
#[derive(Debug, Clone)]
pub struct MulConForward {
    /// `N × WH × C` spatial features.
    pub features: Var,
    /// `N × L × D` label-level embeddings.
    pub embeddings: Var,
    /// `N × L` label probabilities.
    pub probs: Var,
    /// `N × L × d_z` projected unit vectors, when requested.
    pub projected: Option<Var>,
    /// Per-head attention weights, each `N × L × WH`.
    pub attention: Vec<Var>,
}

/// Encoder, class embeddings `U`, attention block, projector and per-label classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct MulConModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    encoder: Encoder,
    queries: ParamId,
    attention: MultiHeadParams,
    projector: Projector,
    classifiers: Vec<(ParamId, ParamId)>,
}

fn model_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, tag]))
}

impl MulConModel {
    /// Deterministic initialization; `U ~ N(0, query_init_std²)`. Values are
    /// rounded to 32-bit floats so a checkpoint stores them exactly.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = model_rng(seed, 0x4d55_4c43);
        let mut params = ParamSet::new();
        let encoder = Encoder::init(&mut params, &config.encoder, &mut rng);
        let c = config.channels();
        let queries = params.add("U", normal(&[config.labels, c], config.query_init_std, &mut rng));
        let attention =
            MultiHeadParams::init(&mut params, "attn", c, config.embed_dim, config.heads, config.scaled_attention, &mut rng)?;
        let d = config.embed_dim;
        let projector = Projector::init(&mut params, d, d, config.proj_dim, &mut rng);
        let classifiers = (0..config.labels)
            .map(|j| {
                let w = params.add(format!("cls.{j}.w"), xavier_uniform(&[d], d, 1, &mut rng));
                let b = params.add(format!("cls.{j}.b"), Tensor::zeros(&[1]));
                (w, b)
            })
            .collect();
        params.round_f32();
        Ok(Self { config: config.clone(), params, encoder, queries, attention, projector, classifiers })
    }

    pub fn attention_params(&self) -> &MultiHeadParams {
        &self.attention
    }

    pub fn query_id(&self) -> ParamId {
        self.queries
    }

    pub fn projector_ids(&self) -> Vec<ParamId> {
        self.projector.ids()
    }

    pub fn classifier_ids(&self, label: usize) -> (ParamId, ParamId) {
        self.classifiers[label]
    }

    pub fn encode(&self, tape: &mut Tape, vars: &Bound, images: Var) -> Result<Var> {
        self.encoder.encode(tape, vars, images)
    }

    /// `g_i = MultiAttBlock(U, r_i, r_i)` for every image; returns `N × L × D`
    /// and the per-head attention weights.
    pub fn label_embeddings(&self, tape: &mut Tape, vars: &Bound, features: Var) -> Result<(Var, Vec<Var>)> {
        let s = tape.shape(features);
        if s.len() != 3 || s[2] != self.config.channels() {
            return shape_err("label_embeddings", format!("features {s:?}, expected N×WH×{}", self.config.channels()));
        }
        let u = vars[self.queries];
        let out = multi_att_block_with_weights(tape, u, features, features, &self.attention, vars)?;
        Ok((out.output, out.weights))
    }

    /// `z_ij = normalize(Proj(g_ij))`, `N × L × d_z`.
    pub fn project(&self, tape: &mut Tape, vars: &Bound, embeddings: Var) -> Result<Var> {
        self.projector.forward(tape, vars, embeddings)
    }

    /// `s_ij = σ(w_j · g_ij + b_j)`: label `j` only sees its own embedding row.
    pub fn classify(&self, tape: &mut Tape, vars: &Bound, embeddings: Var) -> Result<Var> {
        let s = tape.shape(embeddings).to_vec();
        let (l, d) = (self.config.labels, self.config.embed_dim);
        if s.len() != 3 || s[1] != l || s[2] != d {
            return shape_err("classify", format!("embeddings {s:?}, expected N×{l}×{d}"));
        }
        let mut rows = Vec::with_capacity(l);
        let mut biases = Vec::with_capacity(l);
        for &(w, b) in &self.classifiers {
            rows.push(tape.reshape(vars[w], &[1, d])?);
            biases.push(vars[b]);
        }
        let weights = tape.concat(&rows, 0)?;
        let bias = tape.concat(&biases, 0)?;
        let weights = tape.broadcast(weights, s[0])?;
        let prod = tape.mul(embeddings, weights)?;
        let logits = tape.sum_last(prod)?;
        let logits = tape.add_bias(logits, bias)?;
        tape.sigmoid(logits)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &Bound, images: Var, with_projection: bool) -> Result<MulConForward> {
        let features = self.encode(tape, vars, images)?;
        let (embeddings, attention) = self.label_embeddings(tape, vars, features)?;
        let probs = self.classify(tape, vars, embeddings)?;
        let projected = if with_projection { Some(self.project(tape, vars, embeddings)?) } else { None };
        Ok(MulConForward { features, embeddings, probs, projected, attention })
    }
}

/// Encoder, global average pooling and a single `C → L` sigmoid layer; a
/// projector over the pooled feature serves the image-level contrastive variant.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    encoder: Encoder,
    head: (ParamId, ParamId),
    projector: Projector,
}

/// Forward-pass values of [`BackboneModel`].
#[derive(Debug, Clone)]
pub struct BackboneForward {
    /// `N × C` pooled image features.
    pub pooled: Var,
    pub probs: Var,
    /// `N × d_z` projected unit vectors, when requested.
    pub projected: Option<Var>,
}

impl BackboneModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = model_rng(seed, 0x4241_434b);
        let mut params = ParamSet::new();
        let encoder = Encoder::init(&mut params, &config.encoder, &mut rng);
        let (c, l) = (config.channels(), config.labels);
        let w = params.add("head.w", xavier_uniform(&[c, l], c, l, &mut rng));
        let b = params.add("head.b", Tensor::zeros(&[l]));
        let projector = Projector::init(&mut params, c, c, config.proj_dim, &mut rng);
        params.round_f32();
        Ok(Self { config: config.clone(), params, encoder, head: (w, b), projector })
    }

    pub fn projector_ids(&self) -> Vec<ParamId> {
        self.projector.ids()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &Bound, images: Var, with_projection: bool) -> Result<BackboneForward> {
        let fm = self.encoder.feature_map(tape, vars, images)?;
        let s = tape.shape(fm).to_vec();
        let flat = tape.reshape(fm, &[s[0], s[1], s[2] * s[3]])?;
        let summed = tape.sum_last(flat)?;
        let pooled = tape.scale(summed, 1.0 / (s[2] * s[3]) as Real)?;
        let logits = tape.linear(pooled, vars[self.head.0], Some(vars[self.head.1]))?;
        let probs = tape.sigmoid(logits)?;
        let projected = if with_projection { Some(self.projector.forward(tape, vars, pooled)?) } else { None };
        Ok(BackboneForward { pooled, probs, projected })
    }
}

/// Either network, as driven by the trainer and evaluator.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    MulCon(MulConModel),
    Backbone(BackboneModel),
}

impl Network {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Network::MulCon(m) => &m.config,
            Network::Backbone(m) => &m.config,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Network::MulCon(m) => &m.params,
            Network::Backbone(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Network::MulCon(m) => &mut m.params,
            Network::Backbone(m) => &mut m.params,
        }
    }

    pub fn projector_ids(&self) -> Vec<ParamId> {
        match self {
            Network::MulCon(m) => m.projector_ids(),
            Network::Backbone(m) => m.projector_ids(),
        }
    }

    pub fn as_mulcon(&self) -> Option<&MulConModel> {
        match self {
            Network::MulCon(m) => Some(m),
            Network::Backbone(_) => None,
        }
    }

    /// Label probabilities (`N × L`) for a batch of channel-first images.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params().bind(&mut tape);
        let x = tape.constant(images.clone());
        let probs = match self {
            Network::MulCon(m) => m.forward(&mut tape, &vars, x, false)?.probs,
            Network::Backbone(m) => m.forward(&mut tape, &vars, x, false)?.probs,
        };
        Ok(tape.value(probs).clone())
    }
}

/// Shorthand for [`MulConModel::init`].
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<MulConModel> {
    MulConModel::init(config, seed)
}
