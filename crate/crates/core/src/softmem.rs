//! Latent channel: compiler hidden states are mapped to a diagonal Gaussian in
//! the executor embedding space and sampled with the reparameterization trick.
//!
//! A small decoder head scores each soft token against a perceptual descriptor
//! word from the chosen memory entry; that log-likelihood is the alignment term.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::params::{mat_entry, vec_entry, ParamSet};
use crate::scalar::{dot, log_softmax, norm, Scalar};

pub const SIGMA_FLOOR: f64 = 1e-4;
/// Standard deviation of the projection outputs at initialization.
pub const INIT_STD: f64 = 0.0261;

#[derive(Debug, Error, PartialEq)]
pub enum SoftMemError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SoftMemParams<T: Scalar> {
    pub w_mu: Mat<T>,
    pub b_mu: Vec<T>,
    pub w_logsig: Mat<T>,
    pub b_logsig: Vec<T>,
    /// Decoder head over the executor vocabulary.
    pub dec: Mat<T>,
    pub dec_bias: Vec<T>,
}

impl<T: Scalar> SoftMemParams<T> {
    pub fn init(d_mc: usize, d_base: usize, vocab: usize, rng: &mut impl Rng) -> Self {
        let w = INIT_STD / (d_mc as f64).sqrt();
        Self {
            w_mu: Mat::randn(d_mc, d_base, w, rng),
            b_mu: vec![T::zero(); d_base],
            w_logsig: Mat::randn(d_mc, d_base, w, rng),
            b_logsig: vec![T::lit(INIT_STD.ln()); d_base],
            dec: Mat::randn(d_base, vocab, 1.0 / (d_base as f64).sqrt(), rng),
            dec_bias: vec![T::zero(); vocab],
        }
    }

    pub fn d_mc(&self) -> usize {
        self.w_mu.rows()
    }

    pub fn d_base(&self) -> usize {
        self.w_mu.cols()
    }
}

impl<T: Scalar> ParamSet<T> for SoftMemParams<T> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        vec![
            mat_entry("w_mu", &self.w_mu),
            vec_entry("b_mu", &self.b_mu),
            mat_entry("w_logsig", &self.w_logsig),
            vec_entry("b_logsig", &self.b_logsig),
            mat_entry("dec", &self.dec),
            vec_entry("dec_bias", &self.dec_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w_mu.as_mut_slice(),
            &mut self.b_mu,
            self.w_logsig.as_mut_slice(),
            &mut self.b_logsig,
            self.dec.as_mut_slice(),
            &mut self.dec_bias,
        ]
    }
}

/// A sampled block of soft tokens. `values = mu + sigma * noise` with
/// `sigma = max(exp(log_sigma), SIGMA_FLOOR)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SoftTokens<T: Scalar> {
    pub values: Mat<T>,
    pub mu: Mat<T>,
    pub log_sigma: Mat<T>,
    pub noise: Mat<T>,
}

impl<T: Scalar> SoftTokens<T> {
    pub fn sigma(&self, r: usize, c: usize) -> T {
        sigma_of(self.log_sigma.get(r, c))
    }

    pub fn mean_value(&self) -> Vec<T> {
        crate::linalg::mean_rows(&self.values)
    }
}

#[inline]
fn sigma_of<T: Scalar>(ls: T) -> T {
    ls.exp().max(T::lit(SIGMA_FLOOR))
}

fn affine<T: Scalar>(h: &Mat<T>, w: &Mat<T>, b: &[T]) -> Mat<T> {
    let mut out = Mat::zeros(h.rows(), w.cols());
    for r in 0..h.rows() {
        let y = w.vec_mul(h.row(r));
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = y[c] + b[c];
        }
    }
    out
}

/// Projects hidden states with an explicit noise draw.
pub fn project_with_noise<T: Scalar>(
    h: &Mat<T>,
    params: &SoftMemParams<T>,
    noise: Mat<T>,
) -> Result<SoftTokens<T>, SoftMemError> {
    if h.cols() != params.d_mc() {
        return Err(SoftMemError::ShapeMismatch(format!("hidden width {} vs {}", h.cols(), params.d_mc())));
    }
    if noise.shape() != (h.rows(), params.d_base()) {
        return Err(SoftMemError::ShapeMismatch(format!("noise shape {:?}", noise.shape())));
    }
    if !h.all_finite() {
        return Err(SoftMemError::ShapeMismatch("hidden states are not finite".into()));
    }
    let mu = affine(h, &params.w_mu, &params.b_mu);
    let log_sigma = affine(h, &params.w_logsig, &params.b_logsig);
    let values = Mat::from_fn(h.rows(), params.d_base(), |r, c| {
        mu.get(r, c) + sigma_of(log_sigma.get(r, c)) * noise.get(r, c)
    });
    Ok(SoftTokens { values, mu, log_sigma, noise })
}

/// Projects and samples `eps ~ N(0, I)` from `rng`.
pub fn project_sample<T: Scalar>(
    h: &Mat<T>,
    params: &SoftMemParams<T>,
    rng: &mut impl Rng,
) -> Result<SoftTokens<T>, SoftMemError> {
    let noise = Mat::from_fn(h.rows(), params.d_base(), |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    });
    project_with_noise(h, params, noise)
}

/// Deterministic projection (noise fixed at zero), used at evaluation time.
pub fn project_mean<T: Scalar>(h: &Mat<T>, params: &SoftMemParams<T>) -> Result<SoftTokens<T>, SoftMemError> {
    project_with_noise(h, params, Mat::zeros(h.rows(), params.d_base()))
}

/// Backprop into the projection weights. `d_values` is the gradient with respect
/// to `values`; `d_log_sigma_extra` adds direct terms such as the entropy bonus.
pub fn project_backward<T: Scalar>(
    h: &Mat<T>,
    soft: &SoftTokens<T>,
    d_values: &Mat<T>,
    d_log_sigma_extra: Option<&Mat<T>>,
    grads: &mut SoftMemParams<T>,
) {
    let floor = T::lit(SIGMA_FLOOR);
    for r in 0..h.rows() {
        let dmu = d_values.row(r);
        let dls: Vec<T> = (0..d_values.cols())
            .map(|c| {
                let e = soft.log_sigma.get(r, c).exp();
                let through = if e > floor { dmu[c] * soft.noise.get(r, c) * e } else { T::zero() };
                through + d_log_sigma_extra.map_or(T::zero(), |m| m.get(r, c))
            })
            .collect();
        grads.w_mu.add_outer(h.row(r), dmu, T::one());
        grads.w_logsig.add_outer(h.row(r), &dls, T::one());
        for c in 0..dmu.len() {
            grads.b_mu[c] += dmu[c];
            grads.b_logsig[c] += dls[c];
        }
    }
}

/// Value and gradients of the soft objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLoss<T> {
    pub loss: T,
    pub alignment: T,
    pub abs_cos: T,
    pub d_soft_mean: Vec<T>,
    /// Always zero: the text mean is a stop-gradient input.
    pub d_text_mean: Vec<T>,
    pub d_logprobs: Vec<T>,
}

const ZERO_NORM: f64 = 1e-12;

/// `-(1/N) sum(logprobs) + lambda * |cos(soft_mean, text_mean)|`, with the text
/// mean treated as a constant. A zero-length vector makes the cosine term 0.
pub fn soft_loss<T: Scalar>(soft_mean: &[T], text_mean: &[T], latent_logprobs: &[T], lambda: T) -> SoftLoss<T> {
    let n = T::from_usize(latent_logprobs.len().max(1)).expect("count");
    let alignment = -latent_logprobs.iter().copied().sum::<T>() / n;
    let d_logprobs = vec![-T::one() / n; latent_logprobs.len()];
    let (na, nb) = (norm(soft_mean), norm(text_mean));
    let mut d_soft_mean = vec![T::zero(); soft_mean.len()];
    let mut abs_cos = T::zero();
    if na > T::lit(ZERO_NORM) && nb > T::lit(ZERO_NORM) {
        let cos = dot(soft_mean, text_mean) / (na * nb);
        abs_cos = cos.abs();
        let sign = if cos >= T::zero() { T::one() } else { -T::one() };
        for (i, g) in d_soft_mean.iter_mut().enumerate() {
            *g = lambda * sign * (text_mean[i] / (na * nb) - cos * soft_mean[i] / (na * na));
        }
    }
    SoftLoss {
        loss: alignment + lambda * abs_cos,
        alignment,
        abs_cos,
        d_soft_mean,
        d_text_mean: vec![T::zero(); text_mean.len()],
        d_logprobs,
    }
}

/// Differential entropy of the diagonal Gaussian: sum of `log_sigma + 0.5 ln(2 pi e)`.
/// The gradient with respect to every `log_sigma` entry is 1.
pub fn latent_entropy<T: Scalar>(log_sigma: &[T]) -> T {
    let c = T::lit(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
    log_sigma.iter().map(|&l| l + c).sum()
}

/// Decoder log-probabilities `log p(target_i | soft_i)`.
pub fn decoder_logprobs<T: Scalar>(values: &Mat<T>, params: &SoftMemParams<T>, targets: &[usize]) -> Vec<T> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut logits = params.dec.vec_mul(values.row(i));
            for (l, &b) in logits.iter_mut().zip(&params.dec_bias) {
                *l += b;
            }
            log_softmax(&logits)[t]
        })
        .collect()
}

/// Backprop of `sum_i d_logprobs[i] * log p(target_i | soft_i)`. Returns the gradient
/// with respect to the soft values.
pub fn decoder_backward<T: Scalar>(
    values: &Mat<T>,
    params: &SoftMemParams<T>,
    targets: &[usize],
    d_logprobs: &[T],
    grads: &mut SoftMemParams<T>,
) -> Mat<T> {
    let mut d_values = Mat::zeros(values.rows(), values.cols());
    for (i, &t) in targets.iter().enumerate() {
        let mut logits = params.dec.vec_mul(values.row(i));
        for (l, &b) in logits.iter_mut().zip(&params.dec_bias) {
            *l += b;
        }
        let lp = log_softmax(&logits);
        // d logp_t / d logits = onehot(t) - p
        let dlogits: Vec<T> = lp
            .iter()
            .enumerate()
            .map(|(k, &l)| d_logprobs[i] * (if k == t { T::one() } else { T::zero() } - l.exp()))
            .collect();
        grads.dec.add_outer(values.row(i), &dlogits, T::one());
        for (g, &d) in grads.dec_bias.iter_mut().zip(&dlogits) {
            *g += d;
        }
        let dv = params.dec.mul_vec(&dlogits);
        for (o, v) in d_values.row_mut(i).iter_mut().zip(dv) {
            *o += v;
        }
    }
    d_values
}
