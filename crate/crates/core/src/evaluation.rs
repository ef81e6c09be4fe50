//! Shape/texture bias, proxy A-distance and accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{argmax_rows, ModelBundle};
use crate::numcore::{ParamStore, Scalar, Sgd, Tape, Tensor, TensorError};
use crate::synthdata::LabeledSet;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("stimulus {0} has identical content and style labels")]
    NotConflicting(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Model(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Anything that maps `[N, 3, H, W]` images to class indices.
pub trait Classifier {
    fn classify(&self, images: &Tensor<f32>) -> Result<Vec<usize>>;
}

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

impl<T: Scalar> Classifier for ModelBundle<T> {
    fn classify(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(n);
        for idx in chunks(n) {
            let x: Tensor<T> = images.select_rows(&idx).cast();
            let logp = self.inference(&x).map_err(|e| EvalError::Model(e.to_string()))?;
            out.extend(argmax_rows(logp.data(), self.config.num_classes));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub shape_accuracy: f64,
    pub texture_accuracy: f64,
    /// Absent when no prediction matched either cue.
    pub shape_bias: Option<f64>,
    pub texture_bias: Option<f64>,
    pub n_shape_correct: usize,
    pub n_texture_correct: usize,
    pub n_neither: usize,
}

impl BiasReport {
    pub fn from_predictions(pred: &[usize], content: &[usize], style: &[usize]) -> Result<Self> {
        if pred.is_empty() {
            return Err(EvalError::Empty("stimulus set"));
        }
        if pred.len() != content.len() || pred.len() != style.len() {
            return Err(EvalError::Dimension(pred.len(), content.len().min(style.len())));
        }
        let (mut shape, mut texture) = (0, 0);
        for (i, &p) in pred.iter().enumerate() {
            if content[i] == style[i] {
                return Err(EvalError::NotConflicting(i));
            }
            if p == content[i] {
                shape += 1;
            } else if p == style[i] {
                texture += 1;
            }
        }
        let n = pred.len() as f64;
        let matched = shape + texture;
        let bias = |x: usize| (matched > 0).then(|| x as f64 / matched as f64);
        Ok(Self {
            shape_accuracy: shape as f64 / n,
            texture_accuracy: texture as f64 / n,
            shape_bias: bias(shape),
            texture_bias: bias(texture),
            n_shape_correct: shape,
            n_texture_correct: texture,
            n_neither: pred.len() - matched,
        })
    }
}

pub fn bias_metrics<C: Classifier + ?Sized>(model: &C, stimuli: &LabeledSet) -> Result<BiasReport> {
    if stimuli.is_empty() {
        return Err(EvalError::Empty("stimulus set"));
    }
    let pred = model.classify(&stimuli.images)?;
    BiasReport::from_predictions(&pred, &stimuli.content, &stimuli.style)
}

/// Top-1 accuracy on content labels.
pub fn cross_domain_accuracy<C: Classifier + ?Sized>(model: &C, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(EvalError::Empty("evaluation set"));
    }
    let pred = model.classify(&set.images)?;
    Ok(accuracy(&pred, &set.content))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Classifier-input features of the content head, `[N, width]`, in f64.
pub fn penultimate_features<T: Scalar>(model: &ModelBundle<T>, images: &Tensor<f32>) -> Result<Tensor<f64>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let width = model.config.penultimate_width();
    let mut data = Vec::with_capacity(n * width);
    for idx in chunks(n) {
        let x: Tensor<T> = images.select_rows(&idx).cast();
        let f = model.penultimate_features(&x).map_err(|e| EvalError::Model(e.to_string()))?;
        data.extend(f.data().iter().map(|v| v.as_f64()));
    }
    Ok(Tensor::new(&[n, width], data)?)
}

// ---------------------------------------------------------------- proxy A-distance

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub folds: usize,
    pub weight_decay: f64,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            weight_decay: 1e-3,
            lr: 0.5,
            iters: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub d_a: f64,
    /// Held-out error of the domain classifier, averaged over folds.
    pub classifier_error: f64,
    pub fold_errors: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub probe: ProbeConfig,
}

/// Half of `0..n`, chosen by a stream that depends only on the fold and `n`,
/// so swapping two equally sized sets reuses the same partition.
fn half_split(n: usize, seed: u64, fold: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((fold as u64) << 32) | n as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let test = idx.split_off(n / 2);
    (idx, test)
}

/// `d_A = 2 (1 - eps)` where `eps` is the held-out error of an L2-regularized
/// logistic regression separating `a` (`[Na, D]`) from `b` (`[Nb, D]`),
/// averaged over random 50/50 splits stratified per set.
pub fn proxy_a_distance(a: &Tensor<f64>, b: &Tensor<f64>, probe: &ProbeConfig) -> Result<DiscrepancyReport> {
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    if na < 2 || nb < 2 {
        return Err(EvalError::Empty("proxy A-distance needs at least two vectors per set"));
    }
    let (da, db) = (a.numel() / na, b.numel() / nb);
    if da != db || a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(EvalError::Dimension(da, db));
    }
    let mut errors = Vec::with_capacity(probe.folds);
    let (mut n_train, mut n_test) = (0, 0);
    for fold in 0..probe.folds.max(1) {
        let (a_tr, a_te) = half_split(na, probe.seed, fold);
        let (b_tr, b_te) = half_split(nb, probe.seed, fold);
        let gather = |ia: &[usize], ib: &[usize]| {
            let mut x = Vec::with_capacity((ia.len() + ib.len()) * da);
            for &i in ia {
                x.extend_from_slice(&a.data()[i * da..(i + 1) * da]);
            }
            for &i in ib {
                x.extend_from_slice(&b.data()[i * da..(i + 1) * da]);
            }
            let y: Vec<usize> = std::iter::repeat(0).take(ia.len()).chain(std::iter::repeat(1).take(ib.len())).collect();
            (x, y)
        };
        let (xtr, ytr) = gather(&a_tr, &b_tr);
        let (xte, yte) = gather(&a_te, &b_te);
        n_train = ytr.len();
        n_test = yte.len();
        let model = LogisticProbe::fit(&xtr, &ytr, da, probe)?;
        let pred = model.predict(&xte);
        // Balanced error so unequal set sizes do not shift the chance level.
        let err_of = |cls: usize| {
            let (mut wrong, mut total) = (0, 0);
            for (p, &t) in pred.iter().zip(&yte) {
                if t == cls {
                    total += 1;
                    wrong += usize::from(*p != t);
                }
            }
            wrong as f64 / total as f64
        };
        errors.push(0.5 * (err_of(0) + err_of(1)));
    }
    let eps = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(DiscrepancyReport {
        d_a: 2.0 * (1.0 - eps),
        classifier_error: eps,
        fold_errors: errors,
        n_train,
        n_test,
        probe: probe.clone(),
    })
}

/// Two-class softmax regression on standardized features.
struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    dim: usize,
}

impl LogisticProbe {
    fn fit(x: &[f64], y: &[usize], dim: usize, cfg: &ProbeConfig) -> Result<Self> {
        let n = y.len();
        let mut mean = vec![0.0; dim];
        let mut scale = vec![0.0; dim];
        for row in x.chunks(dim) {
            row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n as f64);
        }
        for row in x.chunks(dim) {
            for ((v, m), s) in row.iter().zip(&mean).zip(&mut scale) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let scale: Vec<f64> = scale.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
        let xs = Tensor::new(&[n, dim], standardize(x, &mean, &scale, dim))?;
        let targets = crate::synthdata::one_hot::<f64>(y, 2);

        // Class weights balance the objective when set sizes differ.
        let counts = [y.iter().filter(|&&c| c == 0).count(), y.iter().filter(|&&c| c == 1).count()];
        let weights = Tensor::from_fn(&[n, 2], |i| n as f64 / (2.0 * counts[y[i / 2]] as f64) / n as f64);

        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, dim]));
        let b = store.add("b", Tensor::zeros(&[2]));
        let mut opt = Sgd::new(cfg.lr, 0.9, cfg.weight_decay);
        for _ in 0..cfg.iters {
            let mut tape = Tape::new();
            let xv = tape.constant(&xs);
            let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
            let logits = tape.linear(xv, wv, Some(bv))?;
            let logp = tape.log_softmax(logits)?;
            let yv = tape.constant(&targets);
            let picked = tape.mul(logp, yv)?;
            let cw = tape.constant(&weights);
            let weighted = tape.mul(picked, cw)?;
            let total = tape.sum(weighted)?;
            let loss = tape.scale(total, -1.0)?;
            store.zero_grad_all();
            tape.backward(loss, &mut store)?;
            opt.step(&mut store, &[w, b])?;
        }
        Ok(Self {
            mean,
            scale,
            w: store.peek(w).data().to_vec(),
            b: store.peek(b).data().to_vec(),
            dim,
        })
    }

    fn predict(&self, x: &[f64]) -> Vec<usize> {
        let xs = standardize(x, &self.mean, &self.scale, self.dim);
        xs.chunks(self.dim)
            .map(|row| {
                let score = |c: usize| {
                    self.b[c] + row.iter().zip(&self.w[c * self.dim..(c + 1) * self.dim]).map(|(a, b)| a * b).sum::<f64>()
                };
                usize::from(score(1) > score(0))
            })
            .collect()
    }
}

fn standardize(x: &[f64], mean: &[f64], scale: &[f64], dim: usize) -> Vec<f64> {
    x.chunks(dim)
        .flat_map(|row| row.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) * s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    struct Fixed(Vec<usize>);

    impl Classifier for Fixed {
        fn classify(&self, _: &Tensor<f32>) -> Result<Vec<usize>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn bias_arithmetic() {
        let content = vec![0; 10];
        let style = vec![1; 10];
        let pred = vec![0, 0, 0, 0, 1, 1, 2, 2, 2, 2];
        let r = BiasReport::from_predictions(&pred, &content, &style).unwrap();
        assert_eq!((r.n_shape_correct, r.n_texture_correct, r.n_neither), (4, 2, 4));
        assert!((r.shape_bias.unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!((r.shape_bias.unwrap() + r.texture_bias.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.shape_accuracy + r.texture_accuracy <= 1.0);

        let none = BiasReport::from_predictions(&[2, 2], &[0, 0], &[1, 1]).unwrap();
        assert_eq!(none.shape_bias, None);
        assert!(BiasReport::from_predictions(&[0], &[1], &[1]).is_err());
        assert!(BiasReport::from_predictions(&[], &[], &[]).is_err());
    }

    #[test]
    fn oracle_classifiers() {
        let spec = crate::synthdata::StyleShiftSpec::new(4, 2, 4, 3);
        let s = crate::synthdata::generate_cue_conflict(&spec, 2).unwrap();
        let shape = bias_metrics(&Fixed(s.content.clone()), &s).unwrap();
        assert_eq!(shape.shape_bias, Some(1.0));
        let texture = bias_metrics(&Fixed(s.style.clone()), &s).unwrap();
        assert_eq!(texture.shape_bias, Some(0.0));
        assert_eq!(cross_domain_accuracy(&Fixed(s.content.clone()), &s).unwrap(), 1.0);
    }

    #[test]
    fn bias_is_permutation_invariant() {
        let content = vec![0, 1, 2, 0, 1, 2];
        let style = vec![1, 2, 0, 2, 0, 1];
        let pred = vec![0, 2, 1, 2, 1, 0];
        let a = BiasReport::from_predictions(&pred, &content, &style).unwrap();
        let p = [5, 3, 1, 0, 2, 4];
        let g = |v: &[usize]| p.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let b = BiasReport::from_predictions(&g(&pred), &g(&content), &g(&style)).unwrap();
        assert_eq!(a, b);
    }

    fn gaussian(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(&[n, d], |i| rng.sample::<f64, _>(StandardNormal) + if i % d == 0 { shift } else { 0.0 })
    }

    #[test]
    fn identical_distributions_give_chance_distance() {
        let mut total = 0.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian(200, 8, 0.0, &mut rng);
            let b = gaussian(200, 8, 0.0, &mut rng);
            let r = proxy_a_distance(&a, &b, &ProbeConfig { seed, ..ProbeConfig::default() }).unwrap();
            assert_eq!(r.d_a, 2.0 * (1.0 - r.classifier_error));
            total += r.d_a;
        }
        let mean = total / 5.0;
        assert!((mean - 1.0).abs() < 0.1, "mean d_A {mean}");
    }

    #[test]
    fn separated_clusters_give_large_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(100, 4, 0.0, &mut rng);
        let b = gaussian(100, 4, 20.0, &mut rng);
        let r = proxy_a_distance(&a, &b, &ProbeConfig::default()).unwrap();
        assert!(r.d_a >= 1.95, "{}", r.d_a);
    }

    #[test]
    fn distance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(120, 6, 0.0, &mut rng);
        let b = gaussian(120, 6, 0.8, &mut rng);
        let p = ProbeConfig::default();
        let ab = proxy_a_distance(&a, &b, &p).unwrap().d_a;
        let ba = proxy_a_distance(&b, &a, &p).unwrap().d_a;
        assert!((ab - ba).abs() < 0.05, "{ab} vs {ba}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(&[4, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(proxy_a_distance(&a, &b, &ProbeConfig::default()), Err(EvalError::Dimension(3, 2))));
    }

    #[test]
    fn model_predictions_are_deterministic() {
        let cfg = crate::network::StageCNNConfig {
            channels: vec![4, 4, 8, 8],
            ..Default::default()
        };
        let model = crate::network::build_model::<f32>(&cfg, 3).unwrap();
        let spec = crate::synthdata::StyleShiftSpec::new(7, 4, 2, 0);
        let set = crate::synthdata::generate_dataset(&spec, &[0]).unwrap().train;
        let f1 = penultimate_features(&model, &set.images).unwrap();
        let f2 = penultimate_features(&model, &set.images).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.shape(), &[set.len(), 8]);
        let acc = cross_domain_accuracy(&model, &set).unwrap();
        let rev: Vec<usize> = (0..set.len()).rev().collect();
        assert_eq!(acc, cross_domain_accuracy(&model, &set.subset(&rev)).unwrap());
    }
}
