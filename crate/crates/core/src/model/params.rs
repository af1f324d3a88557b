use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the adapter down-projection at initialization.
pub const ADAPTER_INIT_STD: f64 = 0.02;

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

fn fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    gaussian(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

/// Where in a block an adapter sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterSite {
    Attention,
    FeedForward,
}

impl AdapterSite {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterSite::Attention => "attn",
            AdapterSite::FeedForward => "ffn",
        }
    }

    pub fn of_index(point: usize) -> (usize, AdapterSite) {
        let site = if point % 2 == 0 {
            AdapterSite::Attention
        } else {
            AdapterSite::FeedForward
        };
        (point / 2, site)
    }
}

/// One bottleneck adapter: `h + GeLU(h W_down + b_down) W_up + b_up`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

impl AdapterParams {
    pub fn zeros(hidden: usize, bottleneck: usize) -> Self {
        Self {
            w_down: Tensor::zeros(&[hidden, bottleneck]),
            b_down: Tensor::zeros(&[bottleneck]),
            w_up: Tensor::zeros(&[bottleneck, hidden]),
            b_up: Tensor::zeros(&[hidden]),
        }
    }

    /// Gaussian down-projection, zero up-projection and biases: the adapter starts as identity.
    pub fn init(hidden: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_down: gaussian(rng, &[hidden, bottleneck], ADAPTER_INIT_STD),
            ..Self::zeros(hidden, bottleneck)
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_down", &mut self.w_down),
            ("b_down", &mut self.b_down),
            ("w_up", &mut self.w_up),
            ("b_up", &mut self.b_up),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Adapters for every insertion point of the encoder, ordered block by block
/// with the attention site before the feed-forward site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub points: Vec<AdapterParams>,
}

impl AdapterSet {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            points: (0..cfg.insertion_points())
                .map(|_| AdapterParams::zeros(cfg.hidden_size, cfg.bottleneck))
                .collect(),
        }
    }

    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            points: (0..cfg.insertion_points())
                .map(|_| AdapterParams::init(cfg.hidden_size, cfg.bottleneck, rng))
                .collect(),
        }
    }

    /// Tensors named `{prefix}.block{b}.{site}.{tensor}`.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.points.len() * 4);
        for (i, point) in self.points.iter().enumerate() {
            let (block, site) = AdapterSite::of_index(i);
            for (name, t) in point.tensors() {
                out.push((format!("{prefix}.block{block}.{}.{name}", site.as_str()), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.points.len() * 4);
        for (i, point) in self.points.iter_mut().enumerate() {
            let (block, site) = AdapterSite::of_index(i);
            for (name, t) in point.tensors_mut() {
                out.push((format!("{prefix}.block{block}.{}.{name}", site.as_str()), t));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.points.iter().map(AdapterParams::num_params).sum()
    }

    pub fn same_shape(&self, other: &AdapterSet) -> bool {
        self.points.len() == other.points.len()
            && self.points.iter().zip(&other.points).all(|(a, b)| {
                a.tensors()
                    .iter()
                    .zip(b.tensors().iter())
                    .all(|((_, x), (_, y))| x.shape() == y.shape())
            })
    }

    /// Flattened values in `named` order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.named("")
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }
}

/// Linear head, optionally preceded by one GeLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub hidden: Option<(Tensor, Tensor)>,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Classifier {
    pub fn init(
        input: usize,
        classes: usize,
        hidden: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match hidden {
            Some(width) => Self {
                hidden: Some((fan_in(rng, input, width), Tensor::zeros(&[width]))),
                weight: fan_in(rng, width, classes),
                bias: Tensor::zeros(&[classes]),
            },
            None => Self {
                hidden: None,
                weight: fan_in(rng, input, classes),
                bias: Tensor::zeros(&[classes]),
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.hidden {
            out.push((format!("{prefix}.hidden.weight"), w));
            out.push((format!("{prefix}.hidden.bias"), b));
        }
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some((w, b)) = &mut self.hidden {
            out.push((format!("{prefix}.hidden.weight"), w));
            out.push((format!("{prefix}.hidden.bias"), b));
        }
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl BlockWeights {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, f) = (cfg.hidden_size, cfg.ffn_size);
        let small = |rng: &mut ChaCha8Rng, n: usize| gaussian(rng, &[n], 0.02);
        Self {
            wq: fan_in(rng, h, h),
            bq: small(rng, h),
            wk: fan_in(rng, h, h),
            bk: small(rng, h),
            wv: fan_in(rng, h, h),
            bv: small(rng, h),
            wo: fan_in(rng, h, h),
            bo: small(rng, h),
            ln1_gain: Tensor::filled(&[h], 1.0),
            ln1_bias: Tensor::zeros(&[h]),
            w_ff1: fan_in(rng, h, f),
            b_ff1: small(rng, f),
            w_ff2: fan_in(rng, f, h),
            b_ff2: small(rng, h),
            ln2_gain: Tensor::filled(&[h], 1.0),
            ln2_bias: Tensor::zeros(&[h]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }
}

/// Frozen encoder weights: embeddings and transformer blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_gain: Tensor,
    pub emb_ln_bias: Tensor,
    pub blocks: Vec<BlockWeights>,
}

impl Backbone {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden_size;
        Self {
            token_emb: gaussian(rng, &[cfg.vocab_size, h], 1.0),
            pos_emb: gaussian(rng, &[cfg.max_seq_len, h], 1.0),
            emb_ln_gain: Tensor::filled(&[h], 1.0),
            emb_ln_bias: Tensor::zeros(&[h]),
            blocks: (0..cfg.num_blocks).map(|_| BlockWeights::init(cfg, rng)).collect(),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone.token_emb".to_string(), &self.token_emb),
            ("backbone.pos_emb".to_string(), &self.pos_emb),
            ("backbone.emb_ln_gain".to_string(), &self.emb_ln_gain),
            ("backbone.emb_ln_bias".to_string(), &self.emb_ln_bias),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.tensors() {
                out.push((format!("backbone.block{b}.{name}"), t));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Trainable parameter groups of a client model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    ThetaG,
    ThetaP,
    PhiA,
    PhiB,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::ThetaG,
        ParamGroup::ThetaP,
        ParamGroup::PhiA,
        ParamGroup::PhiB,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::ThetaG => "theta_g",
            ParamGroup::ThetaP => "theta_p",
            ParamGroup::PhiA => "phi_a",
            ParamGroup::PhiB => "phi_b",
        }
    }
}

/// Frozen backbone plus the trainable global adapter, private adapter and two heads.
///
/// Single-adapter models (plain federated PEFT, local training) carry no
/// private adapter and no global-path head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    pub theta_g: AdapterSet,
    pub theta_p: Option<AdapterSet>,
    pub phi_a: Classifier,
    pub phi_b: Option<Classifier>,
}

/// Parameter accounting in scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ParameterCount {
    pub total: usize,
    pub backbone: usize,
    pub trainable: usize,
    pub trainable_adapters: usize,
    pub communicated: usize,
}

impl ParameterCount {
    pub fn communicated_over_trainable_adapters(&self) -> f64 {
        self.communicated as f64 / self.trainable_adapters as f64
    }
}

impl ModelParams {
    /// Dual-adapter model with every component drawn from `config.seed`.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seeded_rng(config.seed);
        let backbone = Backbone::init(config, &mut rng);
        let theta_g = AdapterSet::init(config, &mut rng);
        let theta_p = AdapterSet::init(config, &mut rng);
        let h = config.hidden_size;
        let phi_a = Classifier::init(h, config.num_classes, config.classifier_hidden, &mut rng);
        let phi_b = Classifier::init(h, config.num_classes, config.classifier_hidden, &mut rng);
        Ok(Self {
            config: config.clone(),
            backbone,
            theta_g,
            theta_p: Some(theta_p),
            phi_a,
            phi_b: Some(phi_b),
        })
    }

    /// Same as [`ModelParams::init`] without the private adapter and global-path head.
    pub fn init_single(config: &EncoderConfig) -> Result<Self> {
        let mut m = Self::init(config)?;
        m.theta_p = None;
        m.phi_b = None;
        Ok(m)
    }

    pub fn is_dual(&self) -> bool {
        self.theta_p.is_some()
    }

    pub fn private_adapter(&self) -> Result<&AdapterSet> {
        self.theta_p.as_ref().ok_or(Error::NoPrivateAdapter)
    }

    /// Trainable tensors, grouped, with stable names.
    pub fn named_trainable(&self) -> Vec<(ParamGroup, String, &Tensor)> {
        let mut out: Vec<(ParamGroup, String, &Tensor)> = Vec::new();
        let g = ParamGroup::ThetaG;
        out.extend(self.theta_g.named(g.prefix()).into_iter().map(|(n, t)| (g, n, t)));
        if let Some(p) = &self.theta_p {
            let g = ParamGroup::ThetaP;
            out.extend(p.named(g.prefix()).into_iter().map(|(n, t)| (g, n, t)));
        }
        let g = ParamGroup::PhiA;
        out.extend(self.phi_a.named(g.prefix()).into_iter().map(|(n, t)| (g, n, t)));
        if let Some(b) = &self.phi_b {
            let g = ParamGroup::PhiB;
            out.extend(b.named(g.prefix()).into_iter().map(|(n, t)| (g, n, t)));
        }
        out
    }

    pub fn named_trainable_mut(&mut self) -> Vec<(ParamGroup, String, &mut Tensor)> {
        let mut out: Vec<(ParamGroup, String, &mut Tensor)> = Vec::new();
        let g = ParamGroup::ThetaG;
        out.extend(self.theta_g.named_mut(g.prefix()).into_iter().map(|(n, t)| (g, n, t)));
        if let Some(p) = &mut self.theta_p {
            let g = ParamGroup::ThetaP;
            out.extend(p.named_mut(g.prefix()).into_iter().map(|(n, t)| (g, n, t)));
        }
        let g = ParamGroup::PhiA;
        out.extend(self.phi_a.named_mut(g.prefix()).into_iter().map(|(n, t)| (g, n, t)));
        if let Some(b) = &mut self.phi_b {
            let g = ParamGroup::PhiB;
            out.extend(b.named_mut(g.prefix()).into_iter().map(|(n, t)| (g, n, t)));
        }
        out
    }

    /// Total, trainable and per-round communicated parameter counts.
    pub fn count_parameters(&self) -> ParameterCount {
        let backbone = self.backbone.num_params();
        let theta_g = self.theta_g.num_params();
        let theta_p = self.theta_p.as_ref().map_or(0, AdapterSet::num_params);
        let heads = self.phi_a.num_params() + self.phi_b.as_ref().map_or(0, Classifier::num_params);
        let trainable = theta_g + theta_p + heads;
        ParameterCount {
            total: backbone + trainable,
            backbone,
            trainable,
            trainable_adapters: theta_g + theta_p,
            communicated: theta_g,
        }
    }

    /// Copies `theta_g` into the private adapter and `phi_a` into `phi_b` (when present).
    pub fn collapse_branches(&mut self) {
        if self.theta_p.is_some() {
            self.theta_p = Some(self.theta_g.clone());
        }
        if self.phi_b.is_some() {
            self.phi_b = Some(self.phi_a.clone());
        }
    }
}

/// Draws a scalar uniformly in `[-scale, scale)` for every entry; test and bench helper.
pub fn randomize_adapters(set: &mut AdapterSet, rng: &mut ChaCha8Rng, scale: f64) {
    for point in &mut set.points {
        for (_, t) in point.tensors_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-scale..scale));
        }
    }
}
