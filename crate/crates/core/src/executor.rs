//! Desk-scale executor: token + segment embeddings, one attention head queried
//! from the action-query token, and a factorized head over the grounded action
//! space (an action's logit is the sum of its verb, object and location scores
//! plus a per-action bias).
//!
//! Input row `j` is `embed(tok_j) * gate(seg_j) + segment(seg_j)`, so the same
//! word carries segment-specific features through the value path.
//!
//! Pre-softmax score for position `j`:
//!
//! ```text
//! s_j = (q . k_j) / sqrt(d) - recency * age_j
//! ```
//!
//! `age_j` is how many steps ago the token was placed in context. Context injected
//! once at episode start ages every step; context rebuilt each step stays at age 0.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, LOCATIONS, OBJECTS};
use crate::linalg::Mat;
use crate::params::{mat_entry, vec_entry, ParamSet};
use crate::scalar::{smoothed_cross_entropy, softmax, Scalar};
use crate::text::{fnv1a, words};

#[derive(Debug, Error, PartialEq)]
pub enum ExecutorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence has no memory tokens")]
    NoMemoryTokens,
}

const SPECIALS: [&str; 3] = ["<unk>", "<soft>", "<actq>"];
const TEMPLATE_WORDS: [&str; 40] = [
    "find", "goto", "take", "put", "clean", "heat", "cool", "examine", "some", "in", "on", "and", "it", "the",
    "with", "desklamp", "task", "you", "are", "at", "see", "carry", "nothing", "happens", "arrive", "wake",
    "up", "episode", "is", "over", "do", "not", "again", "navigate", "to", "another", "location", "hot",
    "cold", "examined",
];

/// Fixed word list plus `hash_buckets` shared slots for everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    hash_buckets: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    hash_buckets: usize,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        let mut v = Vocab { words: r.words, index: HashMap::new(), hash_buckets: r.hash_buckets };
        v.reindex();
        v
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { words: v.words, hash_buckets: v.hash_buckets }
    }
}

impl Vocab {
    pub fn new(word_list: &[&str], hash_buckets: usize) -> Self {
        let mut words_v: Vec<String> = Vec::new();
        for w in SPECIALS.iter().chain(word_list) {
            if !words_v.iter().any(|x| x == w) {
                words_v.push(w.to_string());
            }
        }
        let mut v = Self { words: words_v, index: HashMap::new(), hash_buckets };
        v.reindex();
        v
    }

    /// Vocabulary covering every MiniHouse template word.
    pub fn minihouse(hash_buckets: usize) -> Self {
        let list: Vec<&str> = TEMPLATE_WORDS.iter().chain(&LOCATIONS).chain(&OBJECTS).copied().collect();
        Self::new(&list, hash_buckets)
    }

    fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn size(&self) -> usize {
        self.words.len() + self.hash_buckets
    }

    pub fn hash_range(&self) -> std::ops::Range<usize> {
        self.words.len()..self.size()
    }

    pub fn soft_id(&self) -> usize {
        1
    }

    pub fn actq_id(&self) -> usize {
        2
    }

    pub fn id(&self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        if self.hash_buckets == 0 {
            return 0;
        }
        self.words.len() + (fnv1a(word.as_bytes()) % self.hash_buckets as u64) as usize
    }

    /// Lowercase, split on non-alphanumerics, out-of-vocabulary words hashed.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Segment {
    Sys,
    Memory,
    Soft,
    Obs,
    Actq,
}

impl Segment {
    pub const COUNT: usize = 5;

    pub fn index(&self) -> usize {
        match self {
            Segment::Sys => 0,
            Segment::Memory => 1,
            Segment::Soft => 2,
            Segment::Obs => 3,
            Segment::Actq => 4,
        }
    }
}

/// Flattened executor input. Built with [`SeqBuilder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub segments: Vec<Segment>,
    pub ages: Vec<u32>,
    pub soft_slots: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn count(&self, seg: Segment) -> usize {
        self.segments.iter().filter(|s| **s == seg).count()
    }
}

pub struct SeqBuilder<'v> {
    vocab: &'v Vocab,
    seq: TokenSequence,
}

impl<'v> SeqBuilder<'v> {
    pub fn new(vocab: &'v Vocab) -> Self {
        Self { vocab, seq: TokenSequence { tokens: vec![], segments: vec![], ages: vec![], soft_slots: vec![] } }
    }

    pub fn text(mut self, seg: Segment, text: &str, age: u32) -> Self {
        for id in self.vocab.tokenize(text) {
            self.seq.tokens.push(id);
            self.seq.segments.push(seg);
            self.seq.ages.push(age);
        }
        self
    }

    pub fn soft(mut self, n: usize, age: u32) -> Self {
        for _ in 0..n {
            self.seq.soft_slots.push(self.seq.tokens.len());
            self.seq.tokens.push(self.vocab.soft_id());
            self.seq.segments.push(Segment::Soft);
            self.seq.ages.push(age);
        }
        self
    }

    /// Appends the action-query token and returns the sequence.
    pub fn finish(mut self) -> TokenSequence {
        self.seq.tokens.push(self.vocab.actq_id());
        self.seq.segments.push(Segment::Actq);
        self.seq.ages.push(0);
        self.seq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub d_base: usize,
    pub hash_buckets: usize,
    /// Score penalty per step of token age.
    pub recency: f64,
    pub label_smoothing: f64,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self { d_base: 24, hash_buckets: 16, recency: 0.25, label_smoothing: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExecutorParams<T: Scalar> {
    pub embed: Mat<T>,
    pub segment: Mat<T>,
    pub gate: Mat<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub head: Mat<T>,
    pub head_bias: Vec<T>,
    pub recency: T,
}

impl<T: Scalar> ExecutorParams<T> {
    pub fn init(vocab_size: usize, n_actions: usize, cfg: &ExecutorConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_base;
        let s = 1.0 / (d as f64).sqrt();
        Self {
            embed: Mat::randn(vocab_size, d, 0.5, rng),
            segment: Mat::randn(Segment::COUNT, d, 0.5, rng),
            gate: {
                let mut g = Mat::randn(Segment::COUNT, d, 0.5, rng);
                g.as_mut_slice().iter_mut().for_each(|v| *v += T::one());
                g
            },
            wq: Mat::randn(d, d, s, rng),
            wk: Mat::randn(d, d, s, rng),
            wv: Mat::randn(d, d, s, rng),
            head: Mat::randn(d, Action::FACTOR_COUNT, s, rng),
            head_bias: vec![T::zero(); n_actions],
            recency: T::lit(cfg.recency),
        }
    }

    pub fn d_base(&self) -> usize {
        self.embed.cols()
    }

    pub fn n_actions(&self) -> usize {
        self.head_bias.len()
    }
}

impl<T: Scalar> ParamSet<T> for ExecutorParams<T> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let m = mat_entry;
        vec![
            m("embed", &self.embed),
            m("segment", &self.segment),
            m("gate", &self.gate),
            m("wq", &self.wq),
            m("wk", &self.wk),
            m("wv", &self.wv),
            m("head", &self.head),
            vec_entry("head_bias", &self.head_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.embed.as_mut_slice(),
            self.segment.as_mut_slice(),
            self.gate.as_mut_slice(),
            self.wq.as_mut_slice(),
            self.wk.as_mut_slice(),
            self.wv.as_mut_slice(),
            self.head.as_mut_slice(),
            &mut self.head_bias,
        ]
    }
}

/// Forward result plus the caches backprop needs.
#[derive(Debug, Clone)]
pub struct ExecutorOutput<T: Scalar> {
    pub action_logits: Vec<T>,
    /// Pre-softmax scores of the query against every position.
    pub attention_logits: Vec<T>,
    pub attention: Vec<T>,
    base: Mat<T>,
    x: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    q: Vec<T>,
    z: Vec<T>,
}

impl<T: Scalar> ExecutorOutput<T> {
    pub fn attended(&self) -> &[T] {
        &self.z
    }
}

pub fn forward<T: Scalar>(
    seq: &TokenSequence,
    soft: Option<&Mat<T>>,
    p: &ExecutorParams<T>,
) -> Result<ExecutorOutput<T>, ExecutorError> {
    let d = p.d_base();
    let l = seq.len();
    if l == 0 || seq.segments.last() != Some(&Segment::Actq) {
        return Err(ExecutorError::ShapeMismatch("sequence must end with the action query".into()));
    }
    if seq.segments.len() != l || seq.ages.len() != l {
        return Err(ExecutorError::ShapeMismatch("parallel sequence arrays differ in length".into()));
    }
    match soft {
        Some(s) if s.rows() != seq.soft_slots.len() || s.cols() != d => {
            return Err(ExecutorError::ShapeMismatch(format!(
                "soft tokens {:?} vs {} slots of width {d}",
                s.shape(),
                seq.soft_slots.len()
            )))
        }
        None if !seq.soft_slots.is_empty() => {
            return Err(ExecutorError::ShapeMismatch("soft slots present without soft tokens".into()))
        }
        _ => {}
    }
    if let Some(&t) = seq.tokens.iter().find(|&&t| t >= p.embed.rows()) {
        return Err(ExecutorError::ShapeMismatch(format!("token id {t} outside vocabulary")));
    }

    let mut base = Mat::zeros(l, d);
    for j in 0..l {
        base.row_mut(j).copy_from_slice(p.embed.row(seq.tokens[j]));
    }
    if let Some(s) = soft {
        for (i, &slot) in seq.soft_slots.iter().enumerate() {
            base.row_mut(slot).copy_from_slice(s.row(i));
        }
    }
    let mut x = Mat::zeros(l, d);
    for j in 0..l {
        let si = seq.segments[j].index();
        let (seg, gate, b) = (p.segment.row(si), p.gate.row(si), base.row(j));
        for (c, xv) in x.row_mut(j).iter_mut().enumerate() {
            *xv = b[c] * gate[c] + seg[c];
        }
    }
    let q = p.wq.vec_mul(x.row(l - 1));
    let mut k = Mat::zeros(l, d);
    let mut v = Mat::zeros(l, d);
    for j in 0..l {
        k.row_mut(j).copy_from_slice(&p.wk.vec_mul(x.row(j)));
        v.row_mut(j).copy_from_slice(&p.wv.vec_mul(x.row(j)));
    }
    let inv = T::one() / T::from_usize(d).expect("d").sqrt();
    let scores: Vec<T> = (0..l)
        .map(|j| crate::scalar::dot(&q, k.row(j)) * inv - p.recency * T::from_u32(seq.ages[j]).expect("age"))
        .collect();
    let attention = softmax(&scores);
    let mut z = vec![T::zero(); d];
    for (j, &a) in attention.iter().enumerate() {
        for (zc, &vc) in z.iter_mut().zip(v.row(j)) {
            *zc += a * vc;
        }
    }
    let u = p.head.vec_mul(&z);
    let logits: Vec<T> = factor_table()
        .iter()
        .zip(&p.head_bias)
        .map(|(fs, &b)| fs.iter().map(|&f| u[f]).sum::<T>() + b)
        .collect();
    Ok(ExecutorOutput { action_logits: logits, attention_logits: scores, attention, base, x, k, v, q, z })
}

/// Gradients of a scalar loss given `dlogits`; also returns the gradient with
/// respect to the soft-token rows when soft tokens were supplied.
pub fn backward<T: Scalar>(
    seq: &TokenSequence,
    out: &ExecutorOutput<T>,
    dlogits: &[T],
    p: &ExecutorParams<T>,
    grads: &mut ExecutorParams<T>,
) -> Option<Mat<T>> {
    let d = p.d_base();
    let l = seq.len();
    let inv = T::one() / T::from_usize(d).expect("d").sqrt();

    let mut du = vec![T::zero(); p.head.cols()];
    for (fs, &dl) in factor_table().iter().zip(dlogits) {
        for &f in fs {
            du[f] += dl;
        }
    }
    grads.head.add_outer(&out.z, &du, T::one());
    for (g, &dl) in grads.head_bias.iter_mut().zip(dlogits) {
        *g += dl;
    }
    let dz = p.head.mul_vec(&du);

    let da: Vec<T> = (0..l).map(|j| crate::scalar::dot(&dz, out.v.row(j))).collect();
    let mean_da: T = out.attention.iter().zip(&da).map(|(&a, &g)| a * g).sum();
    let ds: Vec<T> = out.attention.iter().zip(&da).map(|(&a, &g)| a * (g - mean_da)).collect();

    let mut dx = Mat::zeros(l, d);
    let mut dq = vec![T::zero(); d];
    for j in 0..l {
        let dsj = ds[j] * inv;
        for (c, dqc) in dq.iter_mut().enumerate() {
            *dqc += dsj * out.k.get(j, c);
        }
        let dk: Vec<T> = out.q.iter().map(|&qc| dsj * qc).collect();
        let dv: Vec<T> = dz.iter().map(|&g| out.attention[j] * g).collect();
        grads.wk.add_outer(out.x.row(j), &dk, T::one());
        grads.wv.add_outer(out.x.row(j), &dv, T::one());
        let back_k = p.wk.mul_vec(&dk);
        let back_v = p.wv.mul_vec(&dv);
        for (c, g) in dx.row_mut(j).iter_mut().enumerate() {
            *g += back_k[c] + back_v[c];
        }
        // the recency scale is a fixed hyperparameter, so no gradient is kept for it
    }
    grads.wq.add_outer(out.x.row(l - 1), &dq, T::one());
    let back_q = p.wq.mul_vec(&dq);
    for (c, g) in dx.row_mut(l - 1).iter_mut().enumerate() {
        *g += back_q[c];
    }

    let mut soft_grad = if seq.soft_slots.is_empty() { None } else { Some(Mat::zeros(seq.soft_slots.len(), d)) };
    let mut slot_of = vec![usize::MAX; l];
    for (i, &s) in seq.soft_slots.iter().enumerate() {
        slot_of[s] = i;
    }
    for j in 0..l {
        let seg = seq.segments[j].index();
        let gx = dx.row(j);
        for (c, &gc) in gx.iter().enumerate() {
            grads.segment.add_at(seg, c, gc);
            grads.gate.add_at(seg, c, gc * out.base.get(j, c));
        }
        let g: Vec<T> = gx.iter().zip(p.gate.row(seg)).map(|(&gc, &w)| gc * w).collect();
        match (slot_of[j], soft_grad.as_mut()) {
            (i, Some(sg)) if i != usize::MAX => {
                for (c, &gc) in g.iter().enumerate() {
                    sg.add_at(i, c, gc);
                }
            }
            _ => {
                for (c, &gc) in g.iter().enumerate() {
                    grads.embed.add_at(seq.tokens[j], c, gc);
                }
            }
        }
    }
    soft_grad
}

/// Label-smoothed cross-entropy on the action logits.
pub fn action_loss<T: Scalar>(out: &ExecutorOutput<T>, target: usize, smoothing: f64) -> (T, Vec<T>) {
    smoothed_cross_entropy(&out.action_logits, target, T::lit(smoothing))
}

/// Argmax (lowest index on ties) at temperature 0, otherwise a softmax sample
/// restricted to the `top_k` largest logits when `top_k > 0`.
pub fn act<T: Scalar>(logits: &[T], temperature: f64, top_k: usize, rng: &mut impl Rng) -> usize {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let probs = sampling_probs(logits, temperature, top_k);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Seeded convenience wrapper around [`act`].
pub fn act_seeded<T: Scalar>(logits: &[T], temperature: f64, top_k: usize, seed: u64) -> usize {
    act(logits, temperature, top_k, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The distribution [`act`] samples from, in f64.
pub fn sampling_probs<T: Scalar>(logits: &[T], temperature: f64, top_k: usize) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
    let mut keep = vec![true; scaled.len()];
    if top_k > 0 && top_k < scaled.len() {
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        keep = vec![false; scaled.len()];
        for &i in &order[..top_k] {
            keep[i] = true;
        }
    }
    let masked: Vec<f64> =
        scaled.iter().zip(&keep).map(|(&s, &k)| if k { s } else { f64::NEG_INFINITY }).collect();
    softmax(&masked)
}

/// Mean pre-softmax score over compiled-memory positions (MEMORY text plus SOFT slots).
pub fn memory_attention_stat<T: Scalar>(out: &ExecutorOutput<T>, seq: &TokenSequence) -> Result<T, ExecutorError> {
    let vals: Vec<T> = seq
        .segments
        .iter()
        .zip(&out.attention_logits)
        .filter(|(s, _)| matches!(s, Segment::Memory | Segment::Soft))
        .map(|(_, &v)| v)
        .collect();
    if vals.is_empty() {
        return Err(ExecutorError::NoMemoryTokens);
    }
    Ok(vals.iter().copied().sum::<T>() / T::from_usize(vals.len()).expect("count"))
}

fn factor_table() -> &'static [Vec<usize>] {
    static TABLE: std::sync::OnceLock<Vec<Vec<usize>>> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| Action::space().iter().map(Action::factors).collect())
}

/// Number of grounded actions the head scores.
pub fn n_actions() -> usize {
    Action::space_size()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Vocab, ExecutorParams<f64>) {
        let vocab = Vocab::minihouse(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ExecutorParams::init(vocab.size(), n_actions(), &ExecutorConfig::default(), &mut rng);
        (vocab, p)
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::minihouse(16);
        assert_eq!(v.tokenize("Take Apple").len(), 2);
        assert_eq!(v.tokenize("take apple"), v.tokenize("TAKE, apple!"));
        for w in ["zebra", "qwerty", "lamp2"] {
            assert!(v.hash_range().contains(&v.id(w)));
        }
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let (v, mut p) = setup();
        p.wk = Mat::zeros(24, 24);
        let seq = SeqBuilder::new(&v).text(Segment::Obs, "take apple now", 0).finish();
        let out = forward(&seq, None, &p).unwrap();
        for a in &out.attention {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_soft_matches_zero_placeholder() {
        let (v, mut p) = setup();
        let seq = SeqBuilder::new(&v).text(Segment::Obs, "goto desk", 0).soft(3, 0).finish();
        let with_soft = forward(&seq, Some(&Mat::zeros(3, 24)), &p).unwrap();
        let soft_id = v.soft_id();
        p.embed.row_mut(soft_id).iter_mut().for_each(|x| *x = 0.0);
        let mut plain = seq.clone();
        plain.soft_slots.clear();
        let out = forward(&plain, None, &p).unwrap();
        assert_eq!(with_soft.action_logits, out.action_logits);
    }

    #[test]
    fn act_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(act(&[3.0f64, 1.0, 1.0], 0.0, 0, &mut rng), 0);
        assert_eq!(act(&[1.0f64, 2.0, 2.0], 0.0, 0, &mut rng), 1);
        let p = sampling_probs(&[1.0f64, 5.0, 3.0], 1.0, 2);
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn memory_stat_is_masked_mean() {
        let (v, p) = setup();
        let seq = SeqBuilder::new(&v)
            .text(Segment::Memory, "heat apple", 2)
            .text(Segment::Obs, "you see mug", 0)
            .finish();
        let out = forward(&seq, None, &p).unwrap();
        let want = (out.attention_logits[0] + out.attention_logits[1]) / 2.0;
        assert_eq!(memory_attention_stat(&out, &seq).unwrap(), want);
        let none = SeqBuilder::new(&v).text(Segment::Obs, "x", 0).finish();
        let o2 = forward(&none, None, &p).unwrap();
        assert_eq!(memory_attention_stat(&o2, &none), Err(ExecutorError::NoMemoryTokens));
    }

    #[test]
    fn shift_invariance_of_argmax() {
        let (v, mut p) = setup();
        let seq = SeqBuilder::new(&v).text(Segment::Obs, "you see apple", 3).finish();
        let a = forward(&seq, None, &p).unwrap();
        p.recency = 0.0;
        let mut seq2 = seq.clone();
        seq2.ages = vec![0; seq.len()];
        let b = forward(&seq2, None, &p).unwrap();
        // uniform ages shift every score by the same constant only when all ages match
        let mut seq3 = seq.clone();
        seq3.ages = vec![7; seq.len()];
        p.recency = 0.25;
        let c = forward(&seq3, None, &p).unwrap();
        for (x, y) in b.attention.iter().zip(&c.attention) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(act(&b.action_logits, 0.0, 0, &mut ChaCha8Rng::seed_from_u64(0)),
                   act(&c.action_logits, 0.0, 0, &mut ChaCha8Rng::seed_from_u64(0)));
        assert!(a.action_logits.iter().all(|x| x.is_finite()));
    }
}
