//! Joint supervised objective over compiler decisions, executor actions and
//! the soft channel.
//!
//! Per batch:
//! `L = L_text + L_action + w_soft * (w_align * align + w_orth * |cos|) - w_ent * H`
//! with `H` the per-coordinate mean entropy of the soft-token Gaussian.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::compiler::learned::{decision_nll, CompilerEncoder, CompilerParams};
use crate::compiler::Decision;
use crate::executor::{self, ExecutorConfig, ExecutorParams, TokenSequence, Vocab};
use crate::harness::build_sequence;
use crate::linalg::Mat;
use crate::params::{AdamW, AdamWConfig, LrSchedule, ParamSet};
use crate::scalar::Scalar;
use crate::softmem::{self, decoder_backward, decoder_logprobs, project_backward, project_sample, SoftMemParams};

use super::data::SftSample;
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub label_smoothing: f64,
    pub soft_weight: f64,
    pub align_weight: f64,
    pub orth_weight: f64,
    pub entropy_weight: f64,
    /// Keep executor weights fixed; only the compiler heads and soft projection learn.
    pub freeze_executor: bool,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            lr: 0.01,
            min_lr: 0.0005,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            label_smoothing: 0.1,
            soft_weight: 1.0,
            align_weight: 1.0,
            orth_weight: 0.1,
            entropy_weight: 0.1,
            freeze_executor: false,
            seed: 0,
        }
    }
}

/// Every trainable tensor of the stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SftModel<T: Scalar> {
    pub compiler: CompilerParams<T>,
    pub executor: ExecutorParams<T>,
    pub softmem: SoftMemParams<T>,
}

impl<T: Scalar> SftModel<T> {
    pub fn init(vocab: &Vocab, exec: &ExecutorConfig, d_mc: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            compiler: CompilerParams::init(0.01, &mut rng),
            executor: ExecutorParams::init(vocab.size(), executor::n_actions(), exec, &mut rng),
            softmem: SoftMemParams::init(d_mc, exec.d_base, vocab.size(), &mut rng),
        }
    }
}

impl<T: Scalar> ParamSet<T> for SftModel<T> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut v = Vec::new();
        for (prefix, ts) in [
            ("compiler", self.compiler.tensors()),
            ("executor", self.executor.tensors()),
            ("softmem", self.softmem.tensors()),
        ] {
            v.extend(ts.into_iter().map(|(n, s, d)| (format!("{prefix}.{n}"), s, d)));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.compiler.tensors_mut();
        v.extend(self.executor.tensors_mut());
        v.extend(self.softmem.tensors_mut());
        v
    }
}

/// A training sample with its token sequence and hidden block materialized.
#[derive(Debug, Clone)]
pub struct PreparedSample<T: Scalar> {
    pub seq: TokenSequence,
    pub hidden: Option<Mat<T>>,
    pub desc_ids: Vec<usize>,
    pub text_ids: Vec<usize>,
    pub target: usize,
    pub decision: Option<Decision>,
}

impl<T: Scalar> PreparedSample<T> {
    pub fn prepare(sample: &SftSample, vocab: &Vocab, encoder: &CompilerEncoder<T>) -> Self {
        let hidden = sample
            .soft
            .as_ref()
            .filter(|s| !s.descriptors.is_empty() && encoder.n_soft() > 0)
            .map(|s| encoder.encode(vocab, &s.descriptors, &s.context));
        let n_soft = hidden.as_ref().map_or(0, Mat::rows);
        let desc_ids = match (&sample.soft, n_soft) {
            (Some(s), n) if n > 0 => (0..n).map(|i| vocab.id(&s.descriptors[i % s.descriptors.len()])).collect(),
            _ => vec![],
        };
        let text_ids = sample.soft.as_ref().map(|s| vocab.tokenize(&s.guidance)).unwrap_or_default();
        Self {
            seq: build_sequence(vocab, &sample.segments, n_soft),
            hidden,
            desc_ids,
            text_ids,
            target: sample.target,
            decision: sample.decision.clone(),
        }
    }
}

/// Loss components, each averaged over the samples it applies to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SftParts {
    pub total: f64,
    pub text: f64,
    pub action: f64,
    pub alignment: f64,
    pub abs_cos: f64,
    pub entropy: f64,
    pub mean_sigma: f64,
}

struct SampleOut<T: Scalar> {
    grads: SftModel<T>,
    total: T,
    text: T,
    action: T,
    soft: Option<(T, T, T, T)>,
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn one_sample<T: Scalar>(
    model: &SftModel<T>,
    text_embed: &Mat<T>,
    s: &PreparedSample<T>,
    cfg: &SftConfig,
    w_exec: T,
    w_text: T,
    seed: u64,
) -> Result<SampleOut<T>, TrainError> {
    let mut g = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let soft = match &s.hidden {
        Some(h) => Some(project_sample(h, &model.softmem, &mut rng)?),
        None => None,
    };
    let out = executor::forward(&s.seq, soft.as_ref().map(|t| &t.values), &model.executor)?;
    let (l_act, dlogits) = executor::action_loss(&out, s.target, cfg.label_smoothing);
    let dlogits: Vec<T> = dlogits.into_iter().map(|d| d * w_exec).collect();
    let d_soft_exec = executor::backward(&s.seq, &out, &dlogits, &model.executor, &mut g.executor);
    let mut total = l_act * w_exec;
    let mut soft_terms = None;
    if let (Some(h), Some(tok)) = (&s.hidden, &soft) {
        let n = tok.values.rows();
        let d = tok.values.cols();
        let logprobs = decoder_logprobs(&tok.values, &model.softmem, &s.desc_ids);
        let text: Vec<T> = if s.text_ids.is_empty() {
            vec![T::zero(); d]
        } else {
            let m = Mat::from_fn(s.text_ids.len(), d, |r, c| text_embed.get(s.text_ids[r], c));
            crate::linalg::mean_rows(&m)
        };
        let sl = softmem::soft_loss(&tok.mean_value(), &text, &logprobs, T::lit(cfg.orth_weight));
        let ws = T::lit(cfg.soft_weight) * w_exec;
        let wa = T::lit(cfg.align_weight);
        let count = T::from_usize(n * d).expect("count");
        let entropy = softmem::latent_entropy(tok.log_sigma.as_slice()) / count;
        total += ws * (wa * sl.alignment + T::lit(cfg.orth_weight) * sl.abs_cos) - T::lit(cfg.entropy_weight) * w_exec * entropy;

        let d_lp: Vec<T> = sl.d_logprobs.iter().map(|&v| v * ws * wa).collect();
        let mut d_values = decoder_backward(&tok.values, &model.softmem, &s.desc_ids, &d_lp, &mut g.softmem);
        let inv_n = T::one() / T::from_usize(n).expect("n");
        for r in 0..n {
            for c in 0..d {
                let extra = sl.d_soft_mean[c] * ws * inv_n + d_soft_exec.as_ref().map_or(T::zero(), |m| m.get(r, c));
                d_values.add_at(r, c, extra);
            }
        }
        let d_ls = Mat::from_fn(n, d, |_, _| -T::lit(cfg.entropy_weight) * w_exec / count);
        project_backward(h, tok, &d_values, Some(&d_ls), &mut g.softmem);
        let mean_sigma = (0..n * d).map(|k| tok.sigma(k / d, k % d)).sum::<T>() / count;
        soft_terms = Some((sl.alignment, sl.abs_cos, entropy, mean_sigma));
    }
    let mut l_text = T::zero();
    if let Some(dec) = &s.decision {
        l_text = decision_nll(&model.compiler, dec, cfg.label_smoothing, 1.0, &mut g.compiler, w_text);
        total += l_text;
        l_text = l_text / w_text;
    }
    Ok(SampleOut { grads: g, total, text: l_text, action: l_act, soft: soft_terms })
}

/// Loss and gradient of a batch. Noise for sample `i` is drawn from a stream
/// derived from `noise_seed` and `i`, so the value is a deterministic function
/// of the parameters.
pub fn sft_loss<T: Scalar>(
    model: &SftModel<T>,
    batch: &[&PreparedSample<T>],
    cfg: &SftConfig,
    noise_seed: u64,
) -> Result<(SftParts, SftModel<T>), TrainError> {
    sft_loss_detached(model, &model.executor.embed, batch, cfg, noise_seed)
}

/// [`sft_loss`] with the text-channel mean read from `text_embed`, a constant
/// embedding table. Passing a frozen copy makes the stop-gradient explicit.
pub fn sft_loss_detached<T: Scalar>(
    model: &SftModel<T>,
    text_embed: &Mat<T>,
    batch: &[&PreparedSample<T>],
    cfg: &SftConfig,
    noise_seed: u64,
) -> Result<(SftParts, SftModel<T>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n_dec = batch.iter().filter(|s| s.decision.is_some()).count();
    let w_exec = T::lit(1.0 / batch.len() as f64);
    let w_text = T::lit(1.0 / n_dec.max(1) as f64);
    let outs: Vec<SampleOut<T>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| one_sample(model, text_embed, s, cfg, w_exec, w_text, sample_seed(noise_seed, i)))
        .collect::<Result<_, _>>()?;
    let mut grads = model.zeros_like();
    let mut parts = SftParts::default();
    let mut n_soft = 0usize;
    for o in &outs {
        grads.axpy(T::one(), &o.grads);
        parts.total += o.total.as_f64();
        parts.action += o.action.as_f64() / batch.len() as f64;
        parts.text += o.text.as_f64() / n_dec.max(1) as f64;
        if let Some((a, c, e, s)) = o.soft {
            n_soft += 1;
            parts.alignment += a.as_f64();
            parts.abs_cos += c.as_f64();
            parts.entropy += e.as_f64();
            parts.mean_sigma += s.as_f64();
        }
    }
    if n_soft > 0 {
        let k = n_soft as f64;
        parts.alignment /= k;
        parts.abs_cos /= k;
        parts.entropy /= k;
        parts.mean_sigma /= k;
    }
    if cfg.freeze_executor {
        grads.executor = grads.executor.zeros_like();
    }
    Ok((parts, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftLogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub parts: SftParts,
}

pub fn log_csv(rows: &[SftLogRow]) -> String {
    let mut s = String::from("step,epoch,lr,grad_norm,total,text,action,alignment,abs_cos,entropy,mean_sigma\n");
    for r in rows {
        let p = &r.parts;
        s.push_str(&format!(
            "{},{},{:.3e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.epoch, r.lr, r.grad_norm, p.total, p.text, p.action, p.alignment, p.abs_cos, p.entropy, p.mean_sigma
        ));
    }
    s
}

/// Minibatch AdamW over `samples` with warmup plus cosine decay.
pub fn run_sft<T: Scalar>(
    model: &mut SftModel<T>,
    samples: &[PreparedSample<T>],
    cfg: &SftConfig,
    mut on_step: impl FnMut(&SftLogRow),
) -> Result<Vec<SftLogRow>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let bs = cfg.batch_size.max(1);
    let per_epoch = samples.len().div_ceil(bs);
    let total = per_epoch * cfg.epochs;
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: (cfg.warmup_frac * total as f64).round() as usize,
        total_steps: total,
    };
    let adam = AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
        max_grad_norm: cfg.max_grad_norm,
    };
    let mut opt = AdamW::new(model, adam, schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rows = Vec::with_capacity(total);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let step = opt.steps_taken();
            let batch: Vec<&PreparedSample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let noise_seed = cfg.seed ^ (step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let (parts, grads) = sft_loss(model, &batch, cfg, noise_seed)?;
            if !grads.all_finite() {
                return Err(TrainError::NonFinite("sft gradient"));
            }
            let lr = opt.schedule.at(step);
            let frozen = cfg.freeze_executor.then(|| model.executor.clone());
            let grad_norm = opt.step(model, &grads).as_f64();
            if let Some(e) = frozen {
                // weight decay would still move frozen weights
                model.executor = e;
            }
            let row = SftLogRow { step, epoch, lr, grad_norm, parts };
            on_step(&row);
            rows.push(row);
        }
        if let Some(r) = rows.last() {
            info!(epoch, loss = r.parts.total, action = r.parts.action, text = r.parts.text, "sft epoch");
        }
    }
    Ok(rows)
}
