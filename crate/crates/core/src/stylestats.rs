//! Channel statistics as style, and the feature-space randomizers built on
//! them.
//!
//! The style of a feature map is its per-channel spatial mean and standard
//! deviation; its content is what remains once those are normalized out.
//! [`style_randomize`] keeps a sample's content and moves its style toward a
//! partner's by a random amount; [`content_randomize`] keeps the sample's
//! style and swaps in the partner's content. Both are differentiable through
//! both feature maps.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::numcore::{shape_err, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Variance floor added under the square root of the channel deviation.
pub const EPS_STATS: f64 = 1e-5;

/// Per-channel mean and deviation of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Scalar> StyleStats<T> {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Statistics of every sample in a `[D,H,W]` or `[N,D,H,W]` tensor.
    pub fn of(z: &Tensor<T>, eps: T) -> Result<Vec<Self>> {
        let batched = as_batched(z)?;
        let mut tape = Tape::new();
        let zv = tape.constant(&batched);
        let (mu, sigma) = channel_stats(&mut tape, zv, eps)?;
        let d = batched.shape()[1];
        Ok(tape
            .value(mu)
            .chunks(d)
            .zip(tape.value(sigma).chunks(d))
            .map(|(m, s)| StyleStats {
                mu: m.to_vec(),
                sigma: s.to_vec(),
            })
            .collect())
    }

    /// Packs per-sample statistics into `[N,D]` mean and deviation tensors.
    pub fn stack(stats: &[Self]) -> Result<(Tensor<T>, Tensor<T>)> {
        let d = stats.first().map_or(0, Self::channels);
        if stats.iter().any(|s| s.channels() != d || s.sigma.len() != d) {
            return Err(shape_err("StyleStats::stack", "channels", "ragged channel counts"));
        }
        let mu = stats.iter().flat_map(|s| s.mu.iter().copied()).collect();
        let sigma = stats.iter().flat_map(|s| s.sigma.iter().copied()).collect();
        Ok((Tensor::new(&[stats.len(), d], mu)?, Tensor::new(&[stats.len(), d], sigma)?))
    }
}

/// A style interpolated between a sample and its partner.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomizedStyle<T> {
    pub mu_hat: Vec<T>,
    pub sigma_hat: Vec<T>,
    pub alpha: T,
}

impl<T: Scalar> RandomizedStyle<T> {
    pub fn interpolate(own: &StyleStats<T>, partner: &StyleStats<T>, alpha: T) -> Result<Self> {
        if own.channels() != partner.channels() {
            return Err(shape_err(
                "RandomizedStyle::interpolate",
                "channels",
                format!("{} vs {}", own.channels(), partner.channels()),
            ));
        }
        if !(T::zero()..=T::one()).contains(&alpha) {
            return Err(TensorError::Invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        let mix = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&x, &y)| alpha * x + (T::one() - alpha) * y).collect() };
        Ok(Self {
            mu_hat: mix(&own.mu, &partner.mu),
            sigma_hat: mix(&own.sigma, &partner.sigma),
            alpha,
        })
    }
}

fn as_batched<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    match z.shape() {
        [d, h, w] => z.clone().reshape(&[1, *d, *h, *w]),
        [_, _, _, _] => Ok(z.clone()),
        other => Err(shape_err(
            "channel_stats",
            "rank",
            format!("expected [D,H,W] or [N,D,H,W], got {other:?}"),
        )),
    }
}

/// Differentiable `(mu, sigma)`, each `[N,D]`, of a `[N,D,H,W]` feature map.
pub fn channel_stats<T: Scalar>(tape: &mut Tape<T>, z: Var, eps: T) -> Result<(Var, Var)> {
    let shape = tape.shape(z);
    if shape.len() != 4 {
        return Err(shape_err("channel_stats", "rank", format!("expected [N,D,H,W], got {shape:?}")));
    }
    if shape[2] * shape[3] == 0 {
        return Err(shape_err("channel_stats", "spatial extent", "H*W must be at least 1"));
    }
    let mu = tape.channel_mean(z)?;
    let sigma = tape.channel_std(z, eps)?;
    Ok((mu, sigma))
}

/// Re-normalizes `content` to the target `[N,D]` statistics.
pub fn adain<T: Scalar>(tape: &mut Tape<T>, content: Var, target_mu: Var, target_sigma: Var, eps: T) -> Result<Var> {
    let (mu, sigma) = channel_stats(tape, content, eps)?;
    for (name, v) in [("target mean", target_mu), ("target deviation", target_sigma)] {
        if tape.shape(v) != tape.shape(mu) {
            return Err(shape_err(
                "adain",
                "channels",
                format!("{name} {:?} vs content statistics {:?}", tape.shape(v), tape.shape(mu)),
            ));
        }
    }
    let normalized = tape.standardize(content, mu, sigma)?;
    tape.scale_shift(normalized, target_sigma, target_mu)
}

fn check_pair<T: Scalar>(tape: &Tape<T>, op: &'static str, z: Var, z_prime: Var) -> Result<()> {
    if tape.shape(z) != tape.shape(z_prime) {
        return Err(shape_err(
            op,
            "partner shape",
            format!("{:?} vs {:?}", tape.shape(z), tape.shape(z_prime)),
        ));
    }
    Ok(())
}

/// Style randomization: `sigma_hat * (z - mu(z)) / sigma(z) + mu_hat` with
/// `mu_hat = a mu(z) + (1 - a) mu(z')` and likewise `sigma_hat`, where `a`
/// is drawn per sample.
pub fn style_randomize<T: Scalar>(tape: &mut Tape<T>, z: Var, z_prime: Var, alpha: &[T], eps: T) -> Result<Var> {
    check_pair(tape, "style_randomize", z, z_prime)?;
    if alpha.len() != tape.shape(z)[0] {
        return Err(shape_err(
            "style_randomize",
            "alpha",
            format!("{} weights for batch of {}", alpha.len(), tape.shape(z)[0]),
        ));
    }
    if alpha.iter().any(|a| !(T::zero()..=T::one()).contains(a)) {
        return Err(TensorError::Invalid("style_randomize: alpha outside [0, 1]".into()));
    }
    let (mu, sigma) = channel_stats(tape, z, eps)?;
    let (mu_p, sigma_p) = channel_stats(tape, z_prime, eps)?;
    let beta: Vec<T> = alpha.iter().map(|&a| T::one() - a).collect();
    let mix = |tape: &mut Tape<T>, own: Var, partner: Var| -> Result<Var> {
        let a = tape.row_scale(own, alpha)?;
        let b = tape.row_scale(partner, &beta)?;
        tape.add(a, b)
    };
    let mu_hat = mix(tape, mu, mu_p)?;
    let sigma_hat = mix(tape, sigma, sigma_p)?;
    let normalized = tape.standardize(z, mu, sigma)?;
    tape.scale_shift(normalized, sigma_hat, mu_hat)
}

/// Content randomization: the partner's normalized content carrying `z`'s
/// style, `sigma(z) * (z' - mu(z')) / sigma(z') + mu(z)`.
pub fn content_randomize<T: Scalar>(tape: &mut Tape<T>, z: Var, z_prime: Var, eps: T) -> Result<Var> {
    check_pair(tape, "content_randomize", z, z_prime)?;
    let (mu, sigma) = channel_stats(tape, z, eps)?;
    adain(tape, z_prime, mu, sigma, eps)
}

/// Uniformly random permutation of `0..n` (fixed points allowed).
pub fn shuffle_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Shuffles `z` along the batch axis; returns the partner batch and the
/// permutation used (`partner[i] = z[perm[i]]`).
pub fn batch_shuffle<T: Scalar, R: Rng + ?Sized>(tape: &mut Tape<T>, z: Var, rng: &mut R) -> Result<(Var, Vec<usize>)> {
    let n = tape.shape(z).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(shape_err("batch_shuffle", "batch", "empty batch"));
    }
    let perm = shuffle_permutation(rng, n);
    let shuffled = tape.permute_batch(z, &perm)?;
    Ok((shuffled, perm))
}

/// One interpolation weight per sample, each from `Uniform(0, 1)`.
pub fn sample_alpha<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.gen::<f64>())).collect()
}
