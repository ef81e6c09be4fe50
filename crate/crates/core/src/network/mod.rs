//! Stage-structured CNN split into a feature extractor and two heads.
//!
//! Every stage halves the spatial resolution and is made of
//! `conv3x3 -> per-sample normalization -> per-channel affine -> relu`
//! blocks. Stages
//! `1..=randomization_stage` form the feature extractor; the remaining
//! stages plus global pooling and a linear classifier form the content
//! head. The style head has the content head's architecture with its own,
//! independently initialized parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, Var};
use crate::stylestats::EPS_STATS;

pub mod checkpoint;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// Statistics used by the normalization inside each block. Both are computed
/// per sample; neither touches batch statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// One mean and deviation over all channels and positions of a sample.
    /// Relative per-channel statistics pass through, so block outputs keep a
    /// style signal.
    #[default]
    Layer,
    /// One mean and deviation per channel of a sample. Block outputs then have
    /// nearly input-independent channel statistics.
    Instance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCNNConfig {
    pub num_stages: usize,
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    /// `[C, H, W]` of the input images.
    pub input_shape: [usize; 3],
    /// Number of stages in the feature extractor.
    pub randomization_stage: usize,
    #[serde(default)]
    pub norm: NormKind,
}

impl Default for StageCNNConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            num_classes: 7,
            input_shape: [3, 32, 32],
            randomization_stage: 3,
            norm: NormKind::Layer,
        }
    }
}

impl StageCNNConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NetworkError::Config(m));
        if self.num_stages < 2 {
            return fail(format!("need at least 2 stages, got {}", self.num_stages));
        }
        if self.channels.len() != self.num_stages {
            return fail(format!("{} channel entries for {} stages", self.channels.len(), self.num_stages));
        }
        if self.channels.contains(&0) || self.blocks_per_stage == 0 || self.num_classes == 0 {
            return fail("channels, blocks_per_stage and num_classes must be positive".into());
        }
        if self.randomization_stage < 1 || self.randomization_stage >= self.num_stages {
            return fail(format!(
                "randomization_stage {} outside [1, {}]",
                self.randomization_stage,
                self.num_stages - 1
            ));
        }
        let [c, h, w] = self.input_shape;
        let factor = 1usize << self.num_stages;
        if c == 0 || h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return fail(format!("input {:?} must be divisible by 2^{}", self.input_shape, self.num_stages));
        }
        Ok(())
    }

    /// `[D, H', W']` of the feature maps at the randomization boundary.
    pub fn feature_shape(&self) -> [usize; 3] {
        let s = self.randomization_stage;
        [
            self.channels[s - 1],
            self.input_shape[1] >> s,
            self.input_shape[2] >> s,
        ]
    }

    /// Width of the pooled features feeding the classifier.
    pub fn penultimate_width(&self) -> usize {
        self.channels[self.num_stages - 1]
    }
}

/// `conv3x3 -> per-sample normalization -> per-channel affine -> relu`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stride: usize,
    #[serde(default)]
    pub norm: NormKind,
}

impl ConvBlock {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = tape.param(params, self.kernel);
        let y = tape.conv2d(x, k, None, self.stride, 1)?;
        let normalized = normalize(tape, y, self.norm)?;
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        let affine = tape.scale_shift(normalized, gamma, beta)?;
        Ok(tape.relu(affine)?)
    }
}

fn normalize<T: Scalar>(tape: &mut Tape<T>, y: Var, norm: NormKind) -> Result<Var> {
    let eps = T::lit(EPS_STATS);
    match norm {
        NormKind::Instance => {
            let mu = tape.channel_mean(y)?;
            let sigma = tape.channel_std(y, eps)?;
            Ok(tape.standardize(y, mu, sigma)?)
        }
        NormKind::Layer => {
            let shape = tape.shape(y).to_vec();
            let flat = tape.reshape(y, &[shape[0], 1, shape[1] * shape[2], shape[3]])?;
            let mu = tape.channel_mean(flat)?;
            let sigma = tape.channel_std(flat, eps)?;
            let n = tape.standardize(flat, mu, sigma)?;
            Ok(tape.reshape(n, &shape)?)
        }
    }
}

fn run_stages<T: Scalar>(stages: &[Vec<ConvBlock>], tape: &mut Tape<T>, params: &ParamStore<T>, mut x: Var) -> Result<Var> {
    for block in stages.iter().flatten() {
        x = block.forward(tape, params, x)?;
    }
    Ok(x)
}

/// `G_f`: the first `randomization_stage` stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub stages: Vec<Vec<ConvBlock>>,
    pub input_shape: [usize; 3],
}

impl FeatureExtractor {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(NetworkError::Tensor(TensorError::Shape {
                op: "forward_features",
                dim: "input",
                detail: format!("expected [N, {:?}], got {:?}", self.input_shape, shape),
            }));
        }
        run_stages(&self.stages, tape, params, x)
    }
}

/// `G_c` or `G_s`: remaining stages, global pooling and a linear classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub stages: Vec<Vec<ConvBlock>>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub feature_shape: [usize; 3],
}

impl Head {
    /// Pooled activations feeding the classifier, `[N, width]`.
    pub fn penultimate<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, z: Var) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.len() != 4 || shape[1..] != self.feature_shape {
            return Err(NetworkError::Tensor(TensorError::Shape {
                op: "forward_head",
                dim: "features",
                detail: format!("expected [N, {:?}], got {:?}", self.feature_shape, shape),
            }));
        }
        let h = run_stages(&self.stages, tape, params, z)?;
        Ok(tape.global_avg_pool(h)?)
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, z: Var) -> Result<Var> {
        let pooled = self.penultimate(tape, params, z)?;
        let w = tape.param(params, self.fc_weight);
        let b = tape.param(params, self.fc_bias);
        Ok(tape.linear(pooled, w, Some(b))?)
    }

    /// Log-probabilities, `[N, K]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, z: Var) -> Result<Var> {
        let logits = self.logits(tape, params, z)?;
        Ok(tape.log_softmax(logits)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .stages
            .iter()
            .flatten()
            .flat_map(|b| [b.kernel, b.gamma, b.beta])
            .collect();
        ids.extend([self.fc_weight, self.fc_bias]);
        ids
    }
}

/// Parameter partition used by the three optimizers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroups {
    pub f_all: Vec<ParamId>,
    /// Normalization scale and shift of `G_f`; a subset of `f_all`.
    pub f_affine: Vec<ParamId>,
    pub c_all: Vec<ParamId>,
    pub s_all: Vec<ParamId>,
}

impl ParamGroups {
    /// `f_all` followed by `c_all`: the deployed network.
    pub fn deployed(&self) -> Vec<ParamId> {
        self.f_all.iter().chain(&self.c_all).copied().collect()
    }

    pub fn group_of(&self, id: ParamId) -> &'static str {
        if self.f_affine.contains(&id) {
            "f_affine"
        } else if self.f_all.contains(&id) {
            "f"
        } else if self.c_all.contains(&id) {
            "c"
        } else {
            "s"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSeeds {
    /// Stream for `G_f` and `G_c`.
    pub main: u64,
    /// Stream for `G_s`.
    pub style: u64,
}

/// `(G_f, G_c, G_s)` with their parameters.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    pub config: StageCNNConfig,
    pub params: ParamStore<T>,
    pub extractor: FeatureExtractor,
    pub content_head: Head,
    pub style_head: Head,
    pub groups: ParamGroups,
    pub seeds: ModelSeeds,
}

struct Init<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)));
        self.params.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.params.add(name, Tensor::full(shape, T::lit(v)))
    }

    fn stages(&mut self, prefix: &str, cfg: &StageCNNConfig, range: std::ops::Range<usize>) -> Vec<Vec<ConvBlock>> {
        range
            .map(|s| {
                let out_c = cfg.channels[s];
                (0..cfg.blocks_per_stage)
                    .map(|b| {
                        let in_c = match (s, b) {
                            (0, 0) => cfg.input_shape[0],
                            (_, 0) => cfg.channels[s - 1],
                            _ => out_c,
                        };
                        let name = format!("{prefix}.stage{}.block{}", s + 1, b + 1);
                        let fan_in = (in_c * 9) as f64;
                        ConvBlock {
                            kernel: self.normal(format!("{name}.conv"), &[out_c, in_c, 3, 3], (2.0 / fan_in).sqrt()),
                            gamma: self.constant(format!("{name}.gamma"), &[out_c], 1.0),
                            beta: self.constant(format!("{name}.beta"), &[out_c], 0.0),
                            stride: if b == 0 { 2 } else { 1 },
                            norm: cfg.norm,
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn head(&mut self, prefix: &str, cfg: &StageCNNConfig) -> Head {
        let stages = self.stages(prefix, cfg, cfg.randomization_stage..cfg.num_stages);
        let width = cfg.penultimate_width();
        Head {
            stages,
            fc_weight: self.normal(format!("{prefix}.fc.weight"), &[cfg.num_classes, width], (1.0 / width as f64).sqrt()),
            fc_bias: self.constant(format!("{prefix}.fc.bias"), &[cfg.num_classes], 0.0),
            feature_shape: cfg.feature_shape(),
        }
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic construction from `seed`.
pub fn build_model<T: Scalar>(config: &StageCNNConfig, seed: u64) -> Result<ModelBundle<T>> {
    config.validate()?;
    let seeds = ModelSeeds {
        main: derive_seed(seed, 1),
        style: derive_seed(seed, 2),
    };
    let mut params = ParamStore::new();
    let (extractor, content_head) = {
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seeds.main),
        };
        let stages = init.stages("f", config, 0..config.randomization_stage);
        let extractor = FeatureExtractor {
            stages,
            input_shape: config.input_shape,
        };
        (extractor, init.head("c", config))
    };
    let style_head = Init {
        params: &mut params,
        rng: ChaCha8Rng::seed_from_u64(seeds.style),
    }
    .head("s", config);
    Ok(assemble(config.clone(), params, extractor, content_head, style_head, seeds))
}

fn assemble<T: Scalar>(
    config: StageCNNConfig,
    params: ParamStore<T>,
    extractor: FeatureExtractor,
    content_head: Head,
    style_head: Head,
    seeds: ModelSeeds,
) -> ModelBundle<T> {
    let blocks = extractor.stages.iter().flatten();
    let groups = ParamGroups {
        f_all: blocks.clone().flat_map(|b| [b.kernel, b.gamma, b.beta]).collect(),
        f_affine: blocks.flat_map(|b| [b.gamma, b.beta]).collect(),
        c_all: content_head.param_ids(),
        s_all: style_head.param_ids(),
    };
    ModelBundle {
        config,
        params,
        extractor,
        content_head,
        style_head,
        groups,
        seeds,
    }
}

/// Which head a forward pass goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Content,
    Style,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn head(&self, kind: HeadKind) -> &Head {
        match kind {
            HeadKind::Content => &self.content_head,
            HeadKind::Style => &self.style_head,
        }
    }

    /// Feature maps at the randomization boundary.
    pub fn forward_features(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.extractor.forward(tape, &self.params, x)
    }

    /// Log-probabilities of `kind`'s head on boundary features.
    pub fn forward_head(&self, kind: HeadKind, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        self.head(kind).forward(tape, &self.params, z)
    }

    /// `G_c(G_f(x))` as log-probabilities; no randomization, no style head.
    pub fn inference(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.inference_on(&mut tape, x)?;
        Ok(tape.tensor(out))
    }

    pub(crate) fn inference_on(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Var> {
        let xv = tape.constant(x);
        let z = self.forward_features(tape, xv)?;
        self.forward_head(HeadKind::Content, tape, z)
    }

    /// Scalar multiplications of one inference pass over a single image.
    pub fn inference_mults_per_image(&self) -> Result<u64> {
        let [c, h, w] = self.config.input_shape;
        let mut tape = Tape::new();
        self.inference_on(&mut tape, &Tensor::zeros(&[1, c, h, w]))?;
        Ok(tape.mult_count())
    }

    /// Scalar parameter count of the deployed network `G_c o G_f`.
    pub fn inference_param_count(&self) -> usize {
        self.params.numel(&self.groups.deployed())
    }

    /// Pooled content-head features (classifier input), `[N, width]`.
    pub fn penultimate_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = self.forward_features(&mut tape, xv)?;
        let p = self.content_head.penultimate(&mut tape, &self.params, z)?;
        Ok(tape.tensor(p))
    }

    /// Argmax class per row of `inference(x)`, lowest index on ties.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logp = self.inference(x)?;
        Ok(argmax_rows(logp.data(), self.config.num_classes))
    }
}

/// Index of the maximum of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(data: &[T], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
