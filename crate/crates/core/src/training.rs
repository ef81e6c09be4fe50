//! Losses and the three-update optimization loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{argmax_rows, HeadKind, ModelBundle, NetworkError};
use crate::numcore::{ParamId, ParamStore, Scalar, Sgd, Tape, Tensor, TensorError, Var};
use crate::stylestats::{content_randomize, sample_alpha, shuffle_permutation, style_randomize, EPS_STATS};
use crate::synthdata::{one_hot, LabeledSet};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("non-finite value at iteration {}: {source}", report.iteration)]
    NonFinite {
        report: Box<StepReport>,
        source: TensorError,
    },
    #[error("{update} update changed parameters outside its group: {names:?}")]
    Partition { update: &'static str, names: Vec<String> },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Which parts of the method are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Style randomization plus adversarial style-biased learning.
    #[default]
    Full,
    /// Content head sees unrandomized features.
    NoCbl,
    /// No style head training, no adversarial update.
    NoAsbl,
    /// Plain supervised training on pooled sources.
    Baseline,
}

impl Variant {
    pub fn content_randomization(self) -> bool {
        matches!(self, Variant::Full | Variant::NoAsbl)
    }

    pub fn style_branch(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCbl)
    }
}

impl std::str::FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "sagnet" => Ok(Variant::Full),
            "no_cbl" => Ok(Variant::NoCbl),
            "no_asbl" => Ok(Variant::NoAsbl),
            "baseline" | "deepall" => Ok(Variant::Baseline),
            other => Err(TrainError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoCbl => "no_cbl",
            Variant::NoAsbl => "no_asbl",
            Variant::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_adv: f64,
    pub lambda_unl: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Trace cadence in iterations; 0 keeps only the last step.
    pub log_every: usize,
    /// Diff every parameter around each update and fail on a partition breach.
    pub check_partition: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 0.1,
            lambda_unl: 0.01,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            total_iters: 2000,
            seed: 0,
            variant: Variant::Full,
            log_every: 50,
            check_partition: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return bad("lambda_adv must be finite and >= 0");
        }
        if !(self.lambda_unl >= 0.0 && self.lambda_unl.is_finite()) {
            return bad("lambda_unl must be finite and >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Cosine-decayed learning rate at iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let total = self.total_iters.max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total).cos())
    }

    fn adversarial_active(&self) -> bool {
        self.variant.style_branch() && self.lambda_adv > 0.0
    }
}

/// Gradient norms per parameter group, measured right before each update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub content: f64,
    pub style: f64,
    pub adversarial: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_adv: f64,
    pub l_unl: Option<f64>,
    /// Content-head accuracy on the (randomized) training batch.
    pub batch_accuracy: f64,
    pub grad_norms: GradNorms,
}

// ---------------------------------------------------------------- losses

fn check_one_hot<T: Scalar>(op: &'static str, logp_shape: &[usize], y: &Tensor<T>) -> Result<()> {
    if logp_shape.len() != 2 || y.shape() != logp_shape {
        return Err(TensorError::Invalid(format!("{op}: targets {:?} vs predictions {:?}", y.shape(), logp_shape)).into());
    }
    let k = logp_shape[1];
    for (i, row) in y.data().chunks(k.max(1)).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(TensorError::Invalid(format!("{op}: row {i} of targets is not one-hot")).into());
        }
    }
    Ok(())
}

fn cross_entropy<T: Scalar>(op: &'static str, tape: &mut Tape<T>, logp: Var, y: &Tensor<T>) -> Result<Var> {
    check_one_hot(op, tape.shape(logp), y)?;
    let n = tape.shape(logp)[0];
    let yv = tape.constant(y);
    let picked = tape.mul(logp, yv)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, T::lit(-1.0 / n as f64))?)
}

/// Mean negative log-likelihood of one-hot targets under `logp` (`[N, K]`).
pub fn content_loss<T: Scalar>(tape: &mut Tape<T>, logp_c: Var, y: &Tensor<T>) -> Result<Var> {
    cross_entropy("content_loss", tape, logp_c, y)
}

/// Same formula as [`content_loss`]; applied to the style head.
pub fn style_loss<T: Scalar>(tape: &mut Tape<T>, logp_s: Var, y: &Tensor<T>) -> Result<Var> {
    cross_entropy("style_loss", tape, logp_s, y)
}

/// `lambda * mean_n(-(1/K) sum_k logp[n, k])`: cross-entropy against uniform.
pub fn adversarial_loss<T: Scalar>(tape: &mut Tape<T>, logp_s: Var, lambda: T) -> Result<Var> {
    let shape = tape.shape(logp_s);
    if shape.len() != 2 || shape[1] == 0 {
        return Err(TensorError::Invalid(format!("adversarial_loss: expected [N, K], got {shape:?}")).into());
    }
    let (n, k) = (shape[0], shape[1]);
    let total = tape.sum(logp_s)?;
    Ok(tape.scale(total, -lambda / T::lit((n * k) as f64))?)
}

/// `lambda * mean_n sum_k (p_a[n, k] - p_b[n, k])^2` on probabilities.
pub fn prediction_mse<T: Scalar>(tape: &mut Tape<T>, logp_a: Var, logp_b: Var, lambda: T) -> Result<Var> {
    let n = tape.shape(logp_a).first().copied().unwrap_or(0).max(1);
    let pa = tape.exp(logp_a)?;
    let pb = tape.exp(logp_b)?;
    let d = tape.sub(pa, pb)?;
    let sq = tape.square(d)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, lambda / T::lit(n as f64))?)
}

/// Consistency between the content head's predictions on style-randomized
/// and plain features of unlabeled data: `z` are the features, `z_prime` the
/// shuffled partners, `alpha` the per-sample interpolation weights.
pub fn consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelBundle<T>,
    z: Var,
    z_prime: Var,
    alpha: &[T],
    lambda: T,
) -> Result<Var> {
    let plain = model.forward_head(HeadKind::Content, tape, z)?;
    let zr = style_randomize(tape, z, z_prime, alpha, T::lit(EPS_STATS))?;
    let randomized = model.forward_head(HeadKind::Content, tape, zr)?;
    prediction_mse(tape, randomized, plain, lambda)
}

// ---------------------------------------------------------------- step

/// Trainer state: one optimizer per update so momentum never leaks across
/// parameter groups.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    content_opt: Sgd<T>,
    style_opt: Sgd<T>,
    adv_opt: Sgd<T>,
    aug_rng: ChaCha8Rng,
    // Separate stream so the labeled path is identical with or without
    // unlabeled data.
    unl_rng: ChaCha8Rng,
    iteration: usize,
}

/// Labeled batch: images `[N, C, H, W]` and one-hot targets `[N, K]`.
pub struct Batch<'a, T> {
    pub x: &'a Tensor<T>,
    pub y: &'a Tensor<T>,
}

struct Forward<T> {
    tape: Tape<T>,
    l_c: Var,
    style: Option<(Var, Var)>,
    l_unl: Option<Var>,
    logp_c: Var,
}

fn snapshot<T: Scalar>(store: &ParamStore<T>) -> Vec<Vec<T>> {
    store.ids().map(|id| store.peek(id).data().to_vec()).collect()
}

fn changed_outside<T: Scalar>(store: &ParamStore<T>, before: &[Vec<T>], allowed: &[ParamId]) -> Vec<String> {
    let same = |a: &T, b: &T| a.as_f64().to_bits() == b.as_f64().to_bits();
    store
        .ids()
        .filter(|id| !allowed.contains(id))
        .filter(|&id| {
            let now = store.peek(id).data();
            now.iter().zip(&before[id.index()]).any(|(a, b)| !same(a, b))
        })
        .map(|id| store.name(id).to_string())
        .collect()
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = || Sgd::new(T::lit(config.lr), T::lit(config.momentum), T::lit(config.weight_decay));
        Ok(Self {
            content_opt: opt(),
            style_opt: opt(),
            adv_opt: opt(),
            aug_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_A11A),
            unl_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x0A11_5EED),
            iteration: 0,
            config,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn forward(&mut self, model: &ModelBundle<T>, batch: &Batch<'_, T>, unlabeled: Option<&Tensor<T>>) -> Result<Forward<T>> {
        let cfg = &self.config;
        let eps = T::lit(EPS_STATS);
        let mut tape = Tape::new();
        let x = tape.constant(batch.x);
        let z = model.forward_features(&mut tape, x)?;
        let n = tape.shape(z)[0];
        // Partners and weights are drawn for every variant so that all
        // variants consume the augmentation stream identically.
        let perm = shuffle_permutation(&mut self.aug_rng, n);
        let alpha: Vec<T> = sample_alpha(&mut self.aug_rng, n);
        let z_prime = tape.permute_batch(z, &perm)?;

        let z_content = if cfg.variant.content_randomization() {
            style_randomize(&mut tape, z, z_prime, &alpha, eps)?
        } else {
            z
        };
        let logp_c = model.forward_head(HeadKind::Content, &mut tape, z_content)?;
        let mut l_c = content_loss(&mut tape, logp_c, batch.y)?;

        let mut style = None;
        if cfg.variant.style_branch() {
            let z_style = content_randomize(&mut tape, z, z_prime, eps)?;
            let logp_s = model.forward_head(HeadKind::Style, &mut tape, z_style)?;
            let l_s = style_loss(&mut tape, logp_s, batch.y)?;
            let l_adv = adversarial_loss(&mut tape, logp_s, T::lit(cfg.lambda_adv))?;
            style = Some((l_s, l_adv));
        }

        let mut l_unl = None;
        if let Some(xu) = unlabeled {
            let xu = tape.constant(xu);
            let zu = model.forward_features(&mut tape, xu)?;
            let nu = tape.shape(zu)[0];
            let perm_u = shuffle_permutation(&mut self.unl_rng, nu);
            let alpha_u: Vec<T> = sample_alpha(&mut self.unl_rng, nu);
            let zu_prime = tape.permute_batch(zu, &perm_u)?;
            let l = consistency_loss(&mut tape, model, zu, zu_prime, &alpha_u, T::lit(cfg.lambda_unl))?;
            l_c = tape.add(l_c, l)?;
            l_unl = Some(l);
            if let Some((l_s, l_adv)) = style {
                let zu_style = content_randomize(&mut tape, zu, zu_prime, eps)?;
                let logp_su = model.forward_head(HeadKind::Style, &mut tape, zu_style)?;
                let adv_u = adversarial_loss(&mut tape, logp_su, T::lit(cfg.lambda_adv))?;
                // Expectation over the union of labeled and unlabeled samples.
                let w = T::lit(nu as f64 / (n + nu) as f64);
                let a = tape.scale(l_adv, T::one() - w)?;
                let b = tape.scale(adv_u, w)?;
                let l_adv = tape.add(a, b)?;
                style = Some((l_s, l_adv));
            }
        }
        Ok(Forward {
            tape,
            l_c,
            style,
            l_unl,
            logp_c,
        })
    }

    /// One iteration: content update of `G_f` and `G_c` through the
    /// style-randomized path, style update of `G_s` on content-randomized
    /// features, then the adversarial update of `G_f`'s affine parameters.
    /// All three reuse a single forward pass.
    pub fn step(
        &mut self,
        model: &mut ModelBundle<T>,
        batch: &Batch<'_, T>,
        unlabeled: Option<&Tensor<T>>,
    ) -> Result<StepReport> {
        let lr = self.config.lr_at(self.iteration);
        let mut report = StepReport {
            iteration: self.iteration,
            lr,
            l_c: f64::NAN,
            l_s: f64::NAN,
            l_adv: f64::NAN,
            l_unl: None,
            ..StepReport::default()
        };
        let result = self.step_inner(model, batch, unlabeled, &mut report);
        self.iteration += 1;
        match result {
            Ok(()) => Ok(report),
            Err(TrainError::Tensor(source @ TensorError::NonFinite { .. }))
            | Err(TrainError::Network(NetworkError::Tensor(source @ TensorError::NonFinite { .. }))) => {
                Err(TrainError::NonFinite {
                    report: Box::new(report),
                    source,
                })
            }
            Err(e) => Err(e),
        }
    }

    fn step_inner(
        &mut self,
        model: &mut ModelBundle<T>,
        batch: &Batch<'_, T>,
        unlabeled: Option<&Tensor<T>>,
        report: &mut StepReport,
    ) -> Result<()> {
        let lr = T::lit(report.lr);
        let fwd = self.forward(model, batch, unlabeled)?;
        let tape = &fwd.tape;
        report.l_c = tape.item(fwd.l_c).as_f64();
        report.l_unl = fwd.l_unl.map(|v| tape.item(v).as_f64());
        if let Some((l_s, l_adv)) = fwd.style {
            report.l_s = tape.item(l_s).as_f64();
            report.l_adv = tape.item(l_adv).as_f64();
        } else {
            report.l_s = 0.0;
            report.l_adv = 0.0;
        }
        let k = model.config.num_classes;
        let pred = argmax_rows(tape.value(fwd.logp_c), k);
        let truth = argmax_rows(batch.y.data(), k);
        report.batch_accuracy = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;

        let check = self.config.check_partition;
        let groups = model.groups.clone();

        // Content-biased update.
        let fc = groups.deployed();
        let before = check.then(|| snapshot(&model.params));
        model.params.zero_grad(&fc);
        tape.backward_for(fwd.l_c, &mut model.params, &fc)?;
        report.grad_norms.content = model.params.grad_norm(&fc);
        self.content_opt.lr = lr;
        self.content_opt.step(&mut model.params, &fc)?;
        if let Some(b) = before {
            verify("content", &model.params, &b, &fc)?;
        }

        let Some((l_s, l_adv)) = fwd.style else {
            return Ok(());
        };

        // Style-biased update: only G_s receives gradients.
        let before = check.then(|| snapshot(&model.params));
        model.params.zero_grad(&groups.s_all);
        tape.backward_for(l_s, &mut model.params, &groups.s_all)?;
        report.grad_norms.style = model.params.grad_norm(&groups.s_all);
        self.style_opt.lr = lr;
        self.style_opt.step(&mut model.params, &groups.s_all)?;
        if let Some(b) = before {
            verify("style", &model.params, &b, &groups.s_all)?;
        }

        // Adversarial update of the feature extractor's affine parameters.
        if self.config.adversarial_active() {
            let before = check.then(|| snapshot(&model.params));
            model.params.zero_grad(&groups.f_affine);
            tape.backward_for(l_adv, &mut model.params, &groups.f_affine)?;
            report.grad_norms.adversarial = model.params.grad_norm(&groups.f_affine);
            self.adv_opt.lr = lr;
            self.adv_opt.step(&mut model.params, &groups.f_affine)?;
            if let Some(b) = before {
                verify("adversarial", &model.params, &b, &groups.f_affine)?;
            }
        }
        Ok(())
    }
}

fn verify<T: Scalar>(update: &'static str, store: &ParamStore<T>, before: &[Vec<T>], allowed: &[ParamId]) -> Result<()> {
    let names = changed_outside(store, before, allowed);
    if names.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Partition { update, names })
    }
}

// ---------------------------------------------------------------- loop

/// Cycles through a shuffled index order, reshuffling after each pass.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Trains `model` in place on `data`, optionally with unlabeled images for
/// the consistency and unlabeled adversarial terms. Reports at the trace
/// cadence (and the final step) are returned and, if `trace` is given,
/// written to it one JSON object per line.
pub fn train<T: Scalar>(
    model: &mut ModelBundle<T>,
    data: &LabeledSet,
    unlabeled: Option<&LabeledSet>,
    config: &TrainConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<Vec<StepReport>> {
    if data.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if unlabeled.is_some_and(|u| u.is_empty()) {
        return Err(TrainError::Config("empty unlabeled set".into()));
    }
    let mut trainer = Trainer::<T>::new(config.clone())?;
    let k = model.config.num_classes;
    let images: Tensor<T> = data.images.cast();
    let labels: Tensor<T> = one_hot(&data.content, k);
    let unl_images: Option<Tensor<T>> = unlabeled.map(|u| u.images.cast());
    let mut sampler = BatchSampler::new(data.len(), config.seed ^ 0xDA7A);
    let mut unl_sampler = unlabeled.map(|u| BatchSampler::new(u.len(), config.seed ^ 0x0DA7A));

    let mut reports = Vec::new();
    for t in 0..config.total_iters {
        let idx = sampler.next_batch(config.batch_size);
        let x = images.select_rows(&idx);
        let y = labels.select_rows(&idx);
        let xu = match (&unl_images, &mut unl_sampler) {
            (Some(u), Some(s)) => Some(u.select_rows(&s.next_batch(config.batch_size))),
            _ => None,
        };
        let report = trainer.step(model, &Batch { x: &x, y: &y }, xu.as_ref())?;
        let last = t + 1 == config.total_iters;
        if last || (config.log_every > 0 && t % config.log_every == 0) {
            if let Some(w) = trace.as_deref_mut() {
                serde_json::to_writer(&mut *w, &report).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            reports.push(report);
        }
    }
    Ok(reports)
}
