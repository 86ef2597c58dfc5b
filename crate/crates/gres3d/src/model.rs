//! Multi-query decoupled interaction model: point encoding, text embedding
//! and component decoupling, text-driven sparse query selection, stacked
//! query-superpoint / query-language aggregation layers, and the mask
//! prediction head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::geometry::{self, SceneCloud, SuperpointMask};

/// Hidden width of the per-point encoder MLP.
const POINT_ENC_HIDDEN: usize = 64;

/// Hidden width of the confidence head, as a multiple of the feature
/// dimension. A wide head lets small optimizer steps swing the confidence
/// logits far enough to matter.
const CONF_HIDDEN_FACTOR: usize = 4;

/// Hidden width of the per-layer fuse MLP, as a multiple of the feature
/// dimension; wide for the same reason as the confidence head.
const FUSE_HIDDEN_FACTOR: usize = 1;

/// Evaluation category of a sample: zero/single/multi target crossed with
/// the presence of same-class distractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ZtDis,
    ZtNodis,
    StDis,
    StNodis,
    Mt,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::ZtDis,
        Category::ZtNodis,
        Category::StDis,
        Category::StNodis,
        Category::Mt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::ZtDis => "zt_dis",
            Category::ZtNodis => "zt_nodis",
            Category::StDis => "st_dis",
            Category::StNodis => "st_nodis",
            Category::Mt => "mt",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tokenized referring expression with semantic component position
/// labels and its ground-truth target set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expression {
    pub token_ids: Vec<usize>,
    pub l_main: Vec<usize>,
    pub l_attri: Vec<usize>,
    pub l_auxi: Vec<usize>,
    pub l_pron: Vec<usize>,
    pub l_rel: Vec<usize>,
    pub target_instance_ids: Vec<usize>,
    pub category: Category,
}

impl Expression {
    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    /// Positions of positive words: main, attribute and pronoun tokens.
    pub fn positive_word_positions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .l_main
            .iter()
            .chain(&self.l_attri)
            .chain(&self.l_pron)
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Label sets must be pairwise disjoint subsets of token positions.
    pub fn validate(&self) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::Structure("expression has no tokens".into()));
        }
        let n = self.token_ids.len();
        let mut seen = vec![false; n];
        for (name, set) in [
            ("l_main", &self.l_main),
            ("l_attri", &self.l_attri),
            ("l_auxi", &self.l_auxi),
            ("l_pron", &self.l_pron),
            ("l_rel", &self.l_rel),
        ] {
            for &i in set {
                if i >= n {
                    return Err(Error::Structure(format!(
                        "{name} position {i} out of range for {n} tokens"
                    )));
                }
                if seen[i] {
                    return Err(Error::Structure(format!(
                        "token position {i} labeled by more than one component"
                    )));
                }
                seen[i] = true;
            }
        }
        let consistent = match self.category {
            Category::ZtDis | Category::ZtNodis => self.target_instance_ids.is_empty(),
            Category::StDis | Category::StNodis => self.target_instance_ids.len() == 1,
            Category::Mt => self.target_instance_ids.len() >= 2,
        };
        if !consistent {
            return Err(Error::Structure(format!(
                "category {} inconsistent with {} targets",
                self.category,
                self.target_instance_ids.len()
            )));
        }
        Ok(())
    }
}

/// Model dimensions and query-selection hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Multimodal feature dimension.
    pub d: usize,
    /// Point-feature dimension out of the point encoder.
    pub d_p: usize,
    /// Raw text embedding dimension.
    pub d_t: usize,
    /// Contrastive projection dimension.
    pub c: usize,
    /// Number of stacked aggregation layers.
    pub layers: usize,
    /// Seed queries sampled by farthest superpoint sampling.
    pub n_seed: usize,
    /// Queries retained after text-relevance filtering.
    pub n_q: usize,
    pub vocab_size: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Gaussian relevance label sharpness.
    pub alpha: f64,
    /// Gaussian relevance label scale (meters).
    pub sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            d_p: 32,
            d_t: 64,
            c: 128,
            layers: 6,
            n_seed: 256,
            n_q: 128,
            vocab_size: crate::data::VOCAB_SIZE,
            tau: 1.0,
            alpha: 1.0,
            sigma: 1.0,
        }
    }
}

impl ModelConfig {
    /// Small preset sized for the synthetic scenes the default generator
    /// produces; the full-size defaults need far more superpoints per
    /// scene than desk-scale data provides.
    pub fn desk_scale() -> Self {
        ModelConfig {
            d: 32,
            d_p: 16,
            d_t: 16,
            c: 32,
            layers: 3,
            n_seed: 16,
            n_q: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q > self.n_seed {
            return Err(Error::InvalidArgument(format!(
                "n_q ({}) must not exceed n_seed ({})",
                self.n_q, self.n_seed
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("layers must be at least 1".into()));
        }
        for (name, v) in [
            ("d", self.d),
            ("d_p", self.d_p),
            ("d_t", self.d_t),
            ("c", self.c),
            ("n_seed", self.n_seed),
            ("n_q", self.n_q),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.tau <= 0.0 || self.alpha <= 0.0 || self.sigma <= 0.0 {
            return Err(Error::InvalidArgument(
                "tau, alpha and sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learnable matrices of one aggregation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_sq: Tensor,
    pub w_sk: Tensor,
    pub w_sv: Tensor,
    pub w_qq: Tensor,
    pub w_qk: Tensor,
    pub w_qv: Tensor,
    pub w_lq: Tensor,
    pub w_lk: Tensor,
    pub fuse_w1: Tensor,
    pub fuse_b1: Tensor,
    pub fuse_w2: Tensor,
    pub fuse_b2: Tensor,
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_embedding: Tensor,
    pub w_t: Tensor,
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w2: Tensor,
    pub enc_b2: Tensor,
    pub w_p: Tensor,
    pub layers: Vec<LayerParams>,
    pub w_m: Tensor,
    pub conf_w1: Tensor,
    pub conf_b1: Tensor,
    pub conf_w2: Tensor,
    pub conf_b2: Tensor,
    pub w_q: Tensor,
    pub w_w: Tensor,
}

fn uniform_with_std(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let bound = std * 3.0f64.sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(&[rows, cols], values).expect("sized by construction")
}

/// Magnitude-preserving init for a plain linear layer (std 1/√fan_in).
fn lecun_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    uniform_with_std(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

/// Magnitude-preserving init for a layer whose input passed a rectifier
/// (std √2/√fan_in).
fn he_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    uniform_with_std(rng, rows, cols, (2.0 / rows as f64).sqrt())
}

fn scaled(mut t: Tensor, gain: f64) -> Tensor {
    for v in t.values_mut() {
        *v *= gain;
    }
    t
}

/// Query and key projections of one attention start out as the same
/// matrix (with a gain), so the bilinear similarity is positive
/// semidefinite at initialization and every query attends mostly to its
/// own neighborhood. Without this, attention over many superpoints starts
/// near-uniform and all queries collapse to the same averaged feature.
const ATTN_INIT_GAIN: f64 = 2.0;

/// Spread of the random first-layer encoder biases; with zero biases every
/// rectifier hyperplane passes through the origin and the normalized
/// feature directions barely vary across the scene.
const POINT_ENC_BIAS: f64 = 3.0;

/// The aggregation stack has no residual path for the query stream, so a
/// generic random init contracts all queries toward a shared average
/// within two or three layers. Value projections and the fuse MLP
/// therefore start identity-leaning: the stack is close to an identity
/// map at step 0 and training carves the mixing it needs.
const IDENTITY_NOISE: f64 = 0.25;

/// Positive shift that keeps the fuse rectifier in its linear region at
/// initialization (undone by the second-layer bias).
const FUSE_BIAS_SHIFT: f64 = 30.0;

/// Identity gain of the mask head at init; query masks start out as
/// feature-similarity neighborhoods.
const MASK_INIT_GAIN: f64 = 0.3;

/// Gain on the text projection so word features match the visual feature
/// scale.
const TEXT_INIT_GAIN: f64 = 3.0;

fn identity_leaning(rng: &mut impl Rng, rows: usize, cols: usize, gain: f64, noise: f64) -> Tensor {
    let mut t = scaled(lecun_uniform(rng, rows, cols), noise);
    for i in 0..rows.min(cols) {
        t.values_mut()[i * cols + i] += gain;
    }
    t
}

impl ModelParams {
    /// Random magnitude-preserving initialization: LeCun-uniform linear
    /// layers, He-uniform after rectifiers, shared attention query/key
    /// pairs (see `ATTN_INIT_GAIN`), unit normal token embeddings.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("valid stddev");
        let emb_values = (0..cfg.vocab_size * cfg.d_t)
            .map(|_| normal.sample(rng))
            .collect();
        let enc_b1_values = (0..POINT_ENC_HIDDEN)
            .map(|_| rng.gen_range(-POINT_ENC_BIAS..POINT_ENC_BIAS))
            .collect();
        let layers = (0..cfg.layers)
            .map(|_| {
                let w_s_shared = scaled(lecun_uniform(rng, cfg.d, cfg.d), ATTN_INIT_GAIN);
                let w_q_shared = scaled(lecun_uniform(rng, cfg.d, cfg.d), ATTN_INIT_GAIN);
                let w_l_shared = scaled(lecun_uniform(rng, cfg.d, cfg.d), ATTN_INIT_GAIN);
                let hidden = FUSE_HIDDEN_FACTOR * cfg.d;
                let fuse_w1 = identity_leaning(rng, cfg.d, hidden, 1.0, IDENTITY_NOISE);
                let fuse_w2 = identity_leaning(rng, hidden, cfg.d, 1.0, IDENTITY_NOISE);
                // cancel the rectifier shift exactly: with the first-layer
                // bias at +L, the second layer sees (x·W1 + L) and its bias
                // must subtract L routed through W2
                let fuse_b2_values: Vec<f64> = (0..cfg.d)
                    .map(|j| {
                        let col_sum: f64 = (0..hidden).map(|i| fuse_w2.at(i, j)).sum();
                        -FUSE_BIAS_SHIFT * col_sum
                    })
                    .collect();
                LayerParams {
                    w_sq: w_s_shared.clone(),
                    w_sk: w_s_shared,
                    w_sv: identity_leaning(rng, cfg.d, cfg.d, 1.0, IDENTITY_NOISE),
                    w_qq: w_q_shared.clone(),
                    w_qk: w_q_shared,
                    w_qv: identity_leaning(rng, cfg.d, cfg.d, 0.3, IDENTITY_NOISE),
                    w_lq: w_l_shared.clone(),
                    w_lk: w_l_shared,
                    fuse_w1,
                    fuse_b1: Tensor::new(&[hidden], vec![FUSE_BIAS_SHIFT; hidden])
                        .expect("sized by construction"),
                    fuse_w2,
                    fuse_b2: Tensor::new(&[cfg.d], fuse_b2_values).expect("sized by construction"),
                }
            })
            .collect();
        ModelParams {
            token_embedding: Tensor::new(&[cfg.vocab_size, cfg.d_t], emb_values)
                .expect("sized by construction"),
            // text features must rival the visual features in magnitude or
            // the language pathway drowns in the fuse sum
            w_t: scaled(lecun_uniform(rng, cfg.d_t, cfg.d), TEXT_INIT_GAIN),
            enc_w1: lecun_uniform(rng, 6, POINT_ENC_HIDDEN),
            enc_b1: Tensor::new(&[POINT_ENC_HIDDEN], enc_b1_values)
                .expect("sized by construction"),
            enc_w2: he_uniform(rng, POINT_ENC_HIDDEN, cfg.d_p),
            enc_b2: Tensor::zeros(&[cfg.d_p]),
            w_p: lecun_uniform(rng, cfg.d_p, cfg.d),
            layers,
            w_m: lecun_uniform(rng, cfg.d, cfg.d),
            conf_w1: lecun_uniform(rng, cfg.d, CONF_HIDDEN_FACTOR * cfg.d),
            conf_b1: Tensor::zeros(&[CONF_HIDDEN_FACTOR * cfg.d]),
            conf_w2: he_uniform(rng, CONF_HIDDEN_FACTOR * cfg.d, 1),
            conf_b2: Tensor::zeros(&[1]),
            w_q: lecun_uniform(rng, cfg.d, cfg.c),
            w_w: lecun_uniform(rng, cfg.d, cfg.c),
        }
    }

    /// All-zero parameters with the shapes implied by the config.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                w_sq: Tensor::zeros(&[cfg.d, cfg.d]),
                w_sk: Tensor::zeros(&[cfg.d, cfg.d]),
                w_sv: Tensor::zeros(&[cfg.d, cfg.d]),
                w_qq: Tensor::zeros(&[cfg.d, cfg.d]),
                w_qk: Tensor::zeros(&[cfg.d, cfg.d]),
                w_qv: Tensor::zeros(&[cfg.d, cfg.d]),
                w_lq: Tensor::zeros(&[cfg.d, cfg.d]),
                w_lk: Tensor::zeros(&[cfg.d, cfg.d]),
                fuse_w1: Tensor::zeros(&[cfg.d, FUSE_HIDDEN_FACTOR * cfg.d]),
                fuse_b1: Tensor::zeros(&[FUSE_HIDDEN_FACTOR * cfg.d]),
                fuse_w2: Tensor::zeros(&[FUSE_HIDDEN_FACTOR * cfg.d, cfg.d]),
                fuse_b2: Tensor::zeros(&[cfg.d]),
            })
            .collect();
        ModelParams {
            token_embedding: Tensor::zeros(&[cfg.vocab_size, cfg.d_t]),
            w_t: Tensor::zeros(&[cfg.d_t, cfg.d]),
            enc_w1: Tensor::zeros(&[6, POINT_ENC_HIDDEN]),
            enc_b1: Tensor::zeros(&[POINT_ENC_HIDDEN]),
            enc_w2: Tensor::zeros(&[POINT_ENC_HIDDEN, cfg.d_p]),
            enc_b2: Tensor::zeros(&[cfg.d_p]),
            w_p: Tensor::zeros(&[cfg.d_p, cfg.d]),
            layers,
            w_m: Tensor::zeros(&[cfg.d, cfg.d]),
            conf_w1: Tensor::zeros(&[cfg.d, CONF_HIDDEN_FACTOR * cfg.d]),
            conf_b1: Tensor::zeros(&[CONF_HIDDEN_FACTOR * cfg.d]),
            conf_w2: Tensor::zeros(&[CONF_HIDDEN_FACTOR * cfg.d, 1]),
            conf_b2: Tensor::zeros(&[1]),
            w_q: Tensor::zeros(&[cfg.d, cfg.c]),
            w_w: Tensor::zeros(&[cfg.d, cfg.c]),
        }
    }

    /// Stable (name, tensor) listing; checkpointing, the optimizer and
    /// `bind` all follow this order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("w_t".into(), &self.w_t),
            ("enc_w1".into(), &self.enc_w1),
            ("enc_b1".into(), &self.enc_b1),
            ("enc_w2".into(), &self.enc_w2),
            ("enc_b2".into(), &self.enc_b2),
            ("w_p".into(), &self.w_p),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.w_sq"), &l.w_sq));
            out.push((format!("layers.{i}.w_sk"), &l.w_sk));
            out.push((format!("layers.{i}.w_sv"), &l.w_sv));
            out.push((format!("layers.{i}.w_qq"), &l.w_qq));
            out.push((format!("layers.{i}.w_qk"), &l.w_qk));
            out.push((format!("layers.{i}.w_qv"), &l.w_qv));
            out.push((format!("layers.{i}.w_lq"), &l.w_lq));
            out.push((format!("layers.{i}.w_lk"), &l.w_lk));
            out.push((format!("layers.{i}.fuse_w1"), &l.fuse_w1));
            out.push((format!("layers.{i}.fuse_b1"), &l.fuse_b1));
            out.push((format!("layers.{i}.fuse_w2"), &l.fuse_w2));
            out.push((format!("layers.{i}.fuse_b2"), &l.fuse_b2));
        }
        out.push(("w_m".into(), &self.w_m));
        out.push(("conf_w1".into(), &self.conf_w1));
        out.push(("conf_b1".into(), &self.conf_b1));
        out.push(("conf_w2".into(), &self.conf_w2));
        out.push(("conf_b2".into(), &self.conf_b2));
        out.push(("w_q".into(), &self.w_q));
        out.push(("w_w".into(), &self.w_w));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("w_t".into(), &mut self.w_t),
            ("enc_w1".into(), &mut self.enc_w1),
            ("enc_b1".into(), &mut self.enc_b1),
            ("enc_w2".into(), &mut self.enc_w2),
            ("enc_b2".into(), &mut self.enc_b2),
            ("w_p".into(), &mut self.w_p),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.w_sq"), &mut l.w_sq));
            out.push((format!("layers.{i}.w_sk"), &mut l.w_sk));
            out.push((format!("layers.{i}.w_sv"), &mut l.w_sv));
            out.push((format!("layers.{i}.w_qq"), &mut l.w_qq));
            out.push((format!("layers.{i}.w_qk"), &mut l.w_qk));
            out.push((format!("layers.{i}.w_qv"), &mut l.w_qv));
            out.push((format!("layers.{i}.w_lq"), &mut l.w_lq));
            out.push((format!("layers.{i}.w_lk"), &mut l.w_lk));
            out.push((format!("layers.{i}.fuse_w1"), &mut l.fuse_w1));
            out.push((format!("layers.{i}.fuse_b1"), &mut l.fuse_b1));
            out.push((format!("layers.{i}.fuse_w2"), &mut l.fuse_w2));
            out.push((format!("layers.{i}.fuse_b2"), &mut l.fuse_b2));
        }
        out.push(("w_m".into(), &mut self.w_m));
        out.push(("conf_w1".into(), &mut self.conf_w1));
        out.push(("conf_b1".into(), &mut self.conf_b1));
        out.push(("conf_w2".into(), &mut self.conf_w2));
        out.push(("conf_b2".into(), &mut self.conf_b2));
        out.push(("w_q".into(), &mut self.w_q));
        out.push(("w_w".into(), &mut self.w_w));
        out
    }

    /// Puts every parameter on the tape (in `named` order) and returns
    /// structured handles.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.bind_with_ids(tape).0
    }

    /// Like `bind`, also returning the flat ids in `named` order so
    /// callers can read gradients back per parameter.
    pub fn bind_with_ids(&self, tape: &mut Tape) -> (BoundParams, Vec<TensorId>) {
        let ids: Vec<TensorId> = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone().with_grad()))
            .collect();
        let bound = BoundParams::from_ids(self.layers.len(), &ids).expect("named order matches");
        (bound, ids)
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub w_sq: TensorId,
    pub w_sk: TensorId,
    pub w_sv: TensorId,
    pub w_qq: TensorId,
    pub w_qk: TensorId,
    pub w_qv: TensorId,
    pub w_lq: TensorId,
    pub w_lk: TensorId,
    pub fuse_w1: TensorId,
    pub fuse_b1: TensorId,
    pub fuse_w2: TensorId,
    pub fuse_b2: TensorId,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub token_embedding: TensorId,
    pub w_t: TensorId,
    pub enc_w1: TensorId,
    pub enc_b1: TensorId,
    pub enc_w2: TensorId,
    pub enc_b2: TensorId,
    pub w_p: TensorId,
    pub layers: Vec<BoundLayer>,
    pub w_m: TensorId,
    pub conf_w1: TensorId,
    pub conf_b1: TensorId,
    pub conf_w2: TensorId,
    pub conf_b2: TensorId,
    pub w_q: TensorId,
    pub w_w: TensorId,
}

impl BoundParams {
    /// Reassembles handles from a flat id list in `ModelParams::named`
    /// order.
    pub fn from_ids(n_layers: usize, ids: &[TensorId]) -> Result<Self> {
        let expected = 7 + n_layers * 12 + 7;
        if ids.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} parameter ids for {n_layers} layers, got {}",
                ids.len()
            )));
        }
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("length checked");
        let head = [next(), next(), next(), next(), next(), next(), next()];
        let layers = (0..n_layers)
            .map(|_| BoundLayer {
                w_sq: next(),
                w_sk: next(),
                w_sv: next(),
                w_qq: next(),
                w_qk: next(),
                w_qv: next(),
                w_lq: next(),
                w_lk: next(),
                fuse_w1: next(),
                fuse_b1: next(),
                fuse_w2: next(),
                fuse_b2: next(),
            })
            .collect();
        Ok(BoundParams {
            token_embedding: head[0],
            w_t: head[1],
            enc_w1: head[2],
            enc_b1: head[3],
            enc_w2: head[4],
            enc_b2: head[5],
            w_p: head[6],
            layers,
            w_m: next(),
            conf_w1: next(),
            conf_b1: next(),
            conf_w2: next(),
            conf_b2: next(),
            w_q: next(),
            w_w: next(),
        })
    }
}

/// Everything the forward pass produced that training and inspection need,
/// as live tape handles plus the discrete selection bookkeeping.
pub struct ForwardGraph {
    /// Superpoint features, N_S×D.
    pub s: TensorId,
    /// Projected text features, N_T×D.
    pub t: TensorId,
    /// Seed relevance scores, length N_seed.
    pub relevance: TensorId,
    /// Superpoint index of each seed.
    pub seed_sources: Vec<usize>,
    /// Superpoint index of each retained query.
    pub query_sources: Vec<usize>,
    /// Final query features, N_Q×D.
    pub queries: TensorId,
    /// Per-query mask logits, N_Q×N_S.
    pub mask_logits: TensorId,
    /// Per-query confidence logits, N_Q×1.
    pub conf_logits: TensorId,
    /// Every attention matrix produced by the stacked layers.
    pub attentions: Vec<TensorId>,
}

/// Inference output: per-query masks and confidences plus the aggregated
/// point mask and the provenance of every query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask_logits: Tensor,
    /// Sigmoid confidences, in (0, 1).
    pub confidences: Vec<f64>,
    pub final_point_mask: Vec<bool>,
    pub query_sources: Vec<usize>,
    pub relevance: Vec<f64>,
    pub seed_sources: Vec<usize>,
}

impl Prediction {
    pub fn n_queries(&self) -> usize {
        self.confidences.len()
    }

    /// Binarized mask of one query: positive logit means selected.
    pub fn query_superpoint_mask(&self, query: usize) -> SuperpointMask {
        let n_s = self.mask_logits.cols();
        SuperpointMask {
            values: (0..n_s).map(|s| self.mask_logits.at(query, s) > 0.0).collect(),
        }
    }

    /// Union of the masks of all queries with confidence above 0.5.
    pub fn aggregated_superpoint_mask(&self) -> SuperpointMask {
        let n_s = self.mask_logits.cols();
        let mut values = vec![false; n_s];
        for (q, &conf) in self.confidences.iter().enumerate() {
            if conf > 0.5 {
                for (s, v) in values.iter_mut().enumerate() {
                    *v = *v || self.mask_logits.at(q, s) > 0.0;
                }
            }
        }
        SuperpointMask { values }
    }
}

/// Looks up token embeddings and projects them into the multimodal space.
pub fn embed_text(
    tape: &mut Tape,
    bound: &BoundParams,
    expr: &Expression,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    if let Some(&bad) = expr.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} out of vocabulary (size {})",
            cfg.vocab_size
        )));
    }
    let raw = tape.gather_rows(bound.token_embedding, &expr.token_ids)?;
    tape.matmul(raw, bound.w_t)
}

/// Sums the rows of `t` selected by a component's position labels
/// (a binary row vector dotted with the token features).
pub fn decouple_component(tape: &mut Tape, t: TensorId, label: &[usize]) -> Result<TensorId> {
    let n_t = tape.shape(t)[0];
    if let Some(&bad) = label.iter().find(|&&i| i >= n_t) {
        return Err(Error::InvalidArgument(format!(
            "label position {bad} out of range for {n_t} tokens"
        )));
    }
    let mut row = vec![0.0; n_t];
    for &i in label {
        row[i] = 1.0;
    }
    let sel = tape.constant(&[1, n_t], row)?;
    tape.matmul(sel, t)
}

/// Per-point MLP over (position, color) whose output is centered over the
/// scene and row-normalized (the substituted backbone must hand well-
/// conditioned features to the attention stack), projection into the
/// multimodal space, then superpoint mean pooling.
pub fn encode_points(
    tape: &mut Tape,
    bound: &BoundParams,
    scene: &SceneCloud,
) -> Result<TensorId> {
    let n_p = scene.n_points();
    let d_p = tape.shape(bound.enc_w2)[1];
    let mut input = Vec::with_capacity(n_p * 6);
    for (pos, col) in scene.positions.iter().zip(&scene.colors) {
        input.extend_from_slice(pos);
        input.extend_from_slice(col);
    }
    let x = tape.constant(&[n_p, 6], input)?;
    let raw = tape.mlp_forward(
        x,
        &[(bound.enc_w1, bound.enc_b1), (bound.enc_w2, bound.enc_b2)],
    )?;
    let centered = tape.center_columns(raw)?;
    let unit = tape.normalize_rows(centered)?;
    let feats = tape.mul_scalar(unit, (d_p as f64).sqrt());
    let projected = tape.matmul(feats, bound.w_p)?;
    tape.pool_rows(projected, &scene.superpoint_id, scene.n_superpoints())
}

/// Outcome of text-driven sparse query selection.
pub struct TsqSelection {
    pub queries: TensorId,
    pub query_sources: Vec<usize>,
    pub relevance: TensorId,
    pub seed_sources: Vec<usize>,
}

/// Samples seed queries by farthest superpoint sampling, scores them
/// against the text, and keeps the `n_q` most relevant (ties toward the
/// earlier seed, output in descending relevance order).
pub fn tsq_select(
    tape: &mut Tape,
    s: TensorId,
    centroids: &[[f64; 3]],
    t: TensorId,
    cfg: &ModelConfig,
) -> Result<TsqSelection> {
    let n_s = tape.shape(s)[0];
    if cfg.n_seed > n_s {
        return Err(Error::InvalidArgument(format!(
            "n_seed ({}) exceeds superpoint count ({n_s})",
            cfg.n_seed
        )));
    }
    let seed_sources = geometry::fss(centroids, cfg.n_seed)?;
    let seeds = tape.gather_rows(s, &seed_sources)?;
    let sim = tape.matmul_nt(seeds, t)?;
    let relevance = tape.mean_rows(sim)?;

    let scores = tape.values(relevance).to_vec();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let picked: Vec<usize> = order.into_iter().take(cfg.n_q).collect();

    let query_sources = picked.iter().map(|&i| seed_sources[i]).collect();
    let queries = tape.gather_rows(seeds, &picked)?;
    Ok(TsqSelection {
        queries,
        query_sources,
        relevance,
        seed_sources,
    })
}

/// Query-superpoint aggregation: queries attend over all superpoints.
/// Returns the updated queries and the attention matrix.
pub fn qsa_layer(
    tape: &mut Tape,
    q: TensorId,
    s: TensorId,
    layer: &BoundLayer,
    d: usize,
) -> Result<(TensorId, TensorId)> {
    let scale = 1.0 / (d as f64).sqrt();
    let qq = tape.matmul(q, layer.w_sq)?;
    let sk = tape.matmul(s, layer.w_sk)?;
    let logits = tape.matmul_nt(qq, sk)?;
    let scaled = tape.mul_scalar(logits, scale);
    let attn = tape.softmax_rows(scaled)?;
    let sv = tape.matmul(s, layer.w_sv)?;
    let out = tape.matmul(attn, sv)?;
    Ok((out, attn))
}

/// Query-language aggregation: query self-attention plus cross-attention
/// into the text, fused by an MLP. Returns the updated queries and both
/// attention matrices.
pub fn qla_layer(
    tape: &mut Tape,
    q_s: TensorId,
    t: TensorId,
    layer: &BoundLayer,
    d: usize,
) -> Result<(TensorId, TensorId, TensorId)> {
    let scale = 1.0 / (d as f64).sqrt();

    let qq = tape.matmul(q_s, layer.w_qq)?;
    let qk = tape.matmul(q_s, layer.w_qk)?;
    let self_logits = tape.matmul_nt(qq, qk)?;
    let self_scaled = tape.mul_scalar(self_logits, scale);
    let self_attn = tape.softmax_rows(self_scaled)?;
    let qv = tape.matmul(q_s, layer.w_qv)?;
    let q_r = tape.matmul(self_attn, qv)?;

    let lq = tape.matmul(q_s, layer.w_lq)?;
    let lk = tape.matmul(t, layer.w_lk)?;
    let cross_logits = tape.matmul_nt(lq, lk)?;
    let cross_scaled = tape.mul_scalar(cross_logits, scale);
    let cross_attn = tape.softmax_rows(cross_scaled)?;
    let q_l = tape.matmul(cross_attn, t)?;

    let sum1 = tape.add(q_s, q_r)?;
    let summed = tape.add(sum1, q_l)?;
    let fused = tape.mlp_forward(
        summed,
        &[(layer.fuse_w1, layer.fuse_b1), (layer.fuse_w2, layer.fuse_b2)],
    )?;
    Ok((fused, self_attn, cross_attn))
}

/// Runs the whole pipeline on one (scene, expression) pair, leaving every
/// intermediate on the tape.
pub fn forward_graph(
    tape: &mut Tape,
    bound: &BoundParams,
    scene: &SceneCloud,
    expr: &Expression,
    cfg: &ModelConfig,
) -> Result<ForwardGraph> {
    cfg.validate()?;
    let s = encode_points(tape, bound, scene)?;
    let t = embed_text(tape, bound, expr, cfg)?;
    let centroids = geometry::superpoint_centroids(scene)?;
    let sel = tsq_select(tape, s, &centroids, t, cfg)?;

    let mut attentions = Vec::with_capacity(cfg.layers * 3);
    let mut q = sel.queries;
    for layer in &bound.layers {
        let (q_s, attn) = qsa_layer(tape, q, s, layer, cfg.d)?;
        attentions.push(attn);
        let (fused, self_attn, cross_attn) = qla_layer(tape, q_s, t, layer, cfg.d)?;
        attentions.push(self_attn);
        attentions.push(cross_attn);
        q = fused;
    }

    let s_m = tape.matmul(s, bound.w_m)?;
    let mask_logits = tape.matmul_nt(q, s_m)?;
    let conf_logits = tape.mlp_forward(
        q,
        &[(bound.conf_w1, bound.conf_b1), (bound.conf_w2, bound.conf_b2)],
    )?;

    Ok(ForwardGraph {
        s,
        t,
        relevance: sel.relevance,
        seed_sources: sel.seed_sources,
        query_sources: sel.query_sources,
        queries: q,
        mask_logits,
        conf_logits,
        attentions,
    })
}

/// Pure inference: runs `forward_graph` on a private tape and extracts a
/// [`Prediction`]. The aggregated mask is the union of the masks of all
/// queries with confidence above 0.5, expanded from superpoints to points.
pub fn forward(
    scene: &SceneCloud,
    expr: &Expression,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let graph = forward_graph(&mut tape, &bound, scene, expr, cfg)?;

    let conf = tape.sigmoid(graph.conf_logits);
    let confidences = tape.values(conf).to_vec();
    let mask_logits = Tensor::new(
        &[cfg.n_q, scene.n_superpoints()],
        tape.values(graph.mask_logits).to_vec(),
    )?;
    let relevance = tape.values(graph.relevance).to_vec();

    let mut pred = Prediction {
        mask_logits,
        confidences,
        final_point_mask: Vec::new(),
        query_sources: graph.query_sources,
        relevance,
        seed_sources: graph.seed_sources,
    };
    pred.final_point_mask = pred.aggregated_superpoint_mask().expand_to_points(scene);
    Ok(pred)
}
