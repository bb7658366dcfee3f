//! Trainable compiler policy over a small discrete decision space.
//!
//! Two heads:
//! - fold head: per subgoal verb, a logistic score over observation features
//!   deciding whether to FOLD the current subgoal (applied repeatedly);
//! - select head: a linear score per pool entry plus a NOACTION score, softmaxed.
//!
//! The chosen entry is expanded to text by the template expander. Hidden states
//! for the soft channel come from a frozen random encoder over the chosen entry's
//! descriptor words.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brief::{BriefDelta, BriefState};
use crate::env::{parse_subgoal, GroundTruth, SubgoalVerb, LOCATIONS, OBJECTS};
use crate::executor::Vocab;
use crate::linalg::Mat;
use crate::memory::{CandidatePool, MemoryEntry, Outcome};
use crate::params::{mat_entry, vec_entry, ParamSet};
use crate::scalar::{log_softmax, smoothed_cross_entropy, softmax, Scalar};
use crate::text::{jaccard, word_set, words};

use super::expand::{descriptor_words, expand};
use super::oracle::{fold_once, location_belief, TeacherLabel};
use super::percept::{perceive, subgoal_features, SUBGOAL_FEATURES};
use super::{loop_directive, Compiled, CompiledOutput, CompilerBackend, RuntimeState};

pub const ENTRY_FEATURES: usize = 6;
pub const NOACT_FEATURES: usize = 2;
const VERBS: usize = SubgoalVerb::ALL.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CompilerParams<T: Scalar> {
    pub fold_w: Mat<T>,
    pub fold_b: Vec<T>,
    pub select_w: Vec<T>,
    pub noact_w: Vec<T>,
}

impl<T: Scalar> CompilerParams<T> {
    pub fn init(std: f64, rng: &mut impl Rng) -> Self {
        Self {
            fold_w: Mat::randn(VERBS, SUBGOAL_FEATURES, std, rng),
            fold_b: Mat::<T>::randn(1, VERBS, std, rng).as_slice().to_vec(),
            select_w: Mat::<T>::randn(1, ENTRY_FEATURES, std, rng).as_slice().to_vec(),
            noact_w: Mat::<T>::randn(1, NOACT_FEATURES, std, rng).as_slice().to_vec(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for CompilerParams<T> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        vec![
            mat_entry("fold_w", &self.fold_w),
            vec_entry("fold_b", &self.fold_b),
            vec_entry("select_w", &self.select_w),
            vec_entry("noact_w", &self.noact_w),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.fold_w.as_mut_slice(), &mut self.fold_b, &mut self.select_w, &mut self.noact_w]
    }
}

/// Frozen random encoder producing the N x d_MC hidden block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CompilerEncoder<T: Scalar> {
    pub embed: Mat<T>,
    pub mix: Mat<T>,
    pub pos: Mat<T>,
}

impl<T: Scalar> CompilerEncoder<T> {
    pub fn init(vocab: usize, d_mc: usize, n_soft: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            embed: Mat::randn(vocab, d_mc, 1.0, &mut rng),
            mix: Mat::randn(d_mc, d_mc, 1.0 / (d_mc as f64).sqrt(), &mut rng),
            pos: Mat::randn(n_soft, d_mc, 0.3, &mut rng),
        }
    }

    pub fn n_soft(&self) -> usize {
        self.pos.rows()
    }

    /// `h_i = tanh(mix^T (embed[desc_i] + context) + pos_i)`, descriptors cycled.
    pub fn encode(&self, vocab: &Vocab, descriptors: &[String], context: &str) -> Mat<T> {
        let d = self.embed.cols();
        let ctx_ids = vocab.tokenize(context);
        let mut ctx = vec![T::zero(); d];
        if !ctx_ids.is_empty() {
            let n = T::from_usize(ctx_ids.len()).expect("count");
            for id in ctx_ids {
                for (c, v) in ctx.iter_mut().zip(self.embed.row(id)) {
                    *c += *v / n;
                }
            }
        }
        let ids: Vec<usize> =
            if descriptors.is_empty() { vec![0] } else { descriptors.iter().map(|w| vocab.id(w)).collect() };
        let mut h = Mat::zeros(self.n_soft(), d);
        for i in 0..self.n_soft() {
            let x: Vec<T> = self.embed.row(ids[i % ids.len()]).iter().zip(&ctx).map(|(&a, &b)| a + b).collect();
            let y = self.mix.vec_mul(&x);
            for (c, o) in h.row_mut(i).iter_mut().enumerate() {
                *o = (y[c] + self.pos.get(i, c)).tanh();
            }
        }
        h
    }
}

impl<T: Scalar> ParamSet<T> for CompilerEncoder<T> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        vec![mat_entry("embed", &self.embed), mat_entry("mix", &self.mix), mat_entry("pos", &self.pos)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.embed.as_mut_slice(), self.mix.as_mut_slice(), self.pos.as_mut_slice()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStep {
    pub verb: usize,
    pub features: [f64; SUBGOAL_FEATURES],
    pub folded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectStep {
    pub entries: Vec<[f64; ENTRY_FEATURES]>,
    pub noact: [f64; NOACT_FEATURES],
    /// Index into `entries`, or `entries.len()` for NOACTION.
    pub chosen: usize,
}

/// Every sampled choice in one compile call, enough to recompute its log-prob.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub folds: Vec<FoldStep>,
    pub select: Option<SelectStep>,
}

impl Decision {
    pub fn selected_entry(&self) -> Option<usize> {
        self.select.as_ref().filter(|s| s.chosen < s.entries.len()).map(|s| s.chosen)
    }
}

fn fold_logit<T: Scalar>(p: &CompilerParams<T>, step: &FoldStep) -> T {
    let f: Vec<T> = step.features.iter().map(|&x| T::lit(x)).collect();
    crate::scalar::dot(p.fold_w.row(step.verb), &f) + p.fold_b[step.verb]
}

fn select_scores<T: Scalar>(p: &CompilerParams<T>, step: &SelectStep) -> Vec<T> {
    let lin = |w: &[T], f: &[f64]| w.iter().zip(f).map(|(&a, &b)| a * T::lit(b)).sum::<T>();
    let mut s: Vec<T> = step.entries.iter().map(|f| lin(&p.select_w, f)).collect();
    s.push(lin(&p.noact_w, &step.noact));
    s
}

/// Label-smoothed negative log-likelihood of `decision` at `temperature`, with
/// gradients accumulated into `grads`. Smoothing 0 gives `-log p(decision)`.
pub fn decision_nll<T: Scalar>(
    p: &CompilerParams<T>,
    decision: &Decision,
    smoothing: f64,
    temperature: f64,
    grads: &mut CompilerParams<T>,
    weight: T,
) -> T {
    let tau = T::lit(temperature.max(1e-6));
    let eps = T::lit(smoothing);
    let mut total = T::zero();
    for step in &decision.folds {
        let z = fold_logit(p, step) / tau;
        let (loss, g) = smoothed_cross_entropy(&[T::zero(), z], usize::from(step.folded), eps);
        total += loss;
        let dz = weight * g[1] / tau;
        for (c, &f) in step.features.iter().enumerate() {
            grads.fold_w.add_at(step.verb, c, dz * T::lit(f));
        }
        grads.fold_b[step.verb] += dz;
    }
    if let Some(sel) = &decision.select {
        let scores: Vec<T> = select_scores(p, sel).into_iter().map(|s| s / tau).collect();
        let (loss, g) = smoothed_cross_entropy(&scores, sel.chosen, eps);
        total += loss;
        for (k, f) in sel.entries.iter().enumerate() {
            let ds = weight * g[k] / tau;
            for (w, &x) in grads.select_w.iter_mut().zip(f) {
                *w += ds * T::lit(x);
            }
        }
        let ds = weight * g[sel.entries.len()] / tau;
        for (w, &x) in grads.noact_w.iter_mut().zip(&sel.noact) {
            *w += ds * T::lit(x);
        }
    }
    total * weight
}

/// `log p(decision)` without gradients.
pub fn decision_logprob<T: Scalar>(p: &CompilerParams<T>, decision: &Decision, temperature: f64) -> T {
    let mut scratch = p.zeros_like();
    -decision_nll(p, decision, 0.0, temperature, &mut scratch, T::one())
}

fn entry_features(entry: &MemoryEntry, applicable: bool, goal: &str, subgoal: &str, object: &str) -> [f64; 6] {
    let eg = word_set(&entry.goal);
    let mentions = eg.contains(object) || entry.actions().any(|a| words(a).iter().any(|w| w == object));
    [
        f64::from(u8::from(applicable)),
        jaccard(&eg, &word_set(goal)),
        jaccard(&eg, &word_set(subgoal)),
        f64::from(u8::from(mentions)),
        f64::from(u8::from(entry.outcome == Outcome::Success)),
        1.0,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LearnedCompiler<T: Scalar> {
    pub params: CompilerParams<T>,
    pub encoder: CompilerEncoder<T>,
    pub vocab: Vocab,
    /// 0 means greedy.
    pub temperature: f64,
}

/// Features of the current state shared by inference and teacher labelling.
struct Context {
    brief_after: BriefState,
    folds: Vec<FoldStep>,
    fold_ops: Vec<crate::brief::BriefOp>,
}

impl<T: Scalar> LearnedCompiler<T> {
    pub fn new(vocab: Vocab, d_mc: usize, n_soft: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            params: CompilerParams::init(0.01, &mut rng),
            encoder: CompilerEncoder::init(vocab.size(), d_mc, n_soft, seed ^ 0x5eed),
            vocab,
            temperature: 0.0,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    /// Runs the fold chain; `decide` returns whether to fold given the step.
    fn fold_chain(&self, state: &RuntimeState, mut decide: impl FnMut(&FoldStep, usize) -> bool) -> Context {
        let here = perceive(&state.observation);
        let mut brief = state.brief.clone();
        let mut folds = Vec::new();
        let mut ops = Vec::new();
        while let Some(cur) = brief.current_subgoal.clone() {
            let Some(sub) = parse_subgoal(&cur.description) else { break };
            let mut step = FoldStep { verb: sub.verb.index(), features: subgoal_features(&here, &sub), folded: false };
            step.folded = decide(&step, folds.len());
            let folded = step.folded;
            folds.push(step);
            if !folded {
                break;
            }
            let Some((op, next)) = fold_once(&brief) else { break };
            ops.push(op);
            brief = next;
        }
        Context { brief_after: brief, folds, fold_ops: ops }
    }

    fn select_step(&self, state: &RuntimeState, pool: &CandidatePool, brief: &BriefState) -> SelectStep {
        let here = perceive(&state.observation);
        let cur = brief.current_subgoal.as_ref();
        let sub = cur.and_then(|c| parse_subgoal(&c.description));
        let sub_text = cur.map(|c| c.description.as_str()).unwrap_or("");
        let object = sub.as_ref().map(|s| s.object.as_str()).unwrap_or("");
        let entries: Vec<[f64; ENTRY_FEATURES]> = pool
            .entries
            .iter()
            .map(|e| {
                let ok = sub.as_ref().is_some_and(|s| expand(s, e, &here).is_some());
                entry_features(e, ok, &brief.goal, sub_text, object)
            })
            .collect();
        let any = entries.iter().any(|f| f[0] > 0.5);
        SelectStep { entries, noact: [1.0, f64::from(u8::from(any))], chosen: 0 }
    }

    /// Decision record matching a teacher label on this state.
    pub fn label_decision(&self, state: &RuntimeState, pool: &CandidatePool, label: &TeacherLabel) -> Option<Decision> {
        if label.loop_guard {
            return None;
        }
        let ctx = self.fold_chain(state, |_, i| i < label.folds);
        let mut sel = self.select_step(state, pool, &ctx.brief_after);
        sel.chosen = label.selected.unwrap_or(sel.entries.len());
        Some(Decision { folds: ctx.folds, select: Some(sel) })
    }

    /// Builds the output for a given decision (used after sampling).
    fn realize(
        &self,
        state: &RuntimeState,
        pool: &CandidatePool,
        ctx: Context,
        sel: SelectStep,
    ) -> Compiled<T> {
        let here = perceive(&state.observation);
        let brief = &ctx.brief_after;
        let mut ops = ctx.fold_ops.clone();
        let mut guidance = None;
        let mut reason = None;
        let mut descriptors = Vec::new();
        let mut hidden = None;
        if let Some(entry) = pool.entries.get(sel.chosen) {
            let sub = brief.current_subgoal.as_ref().and_then(|c| parse_subgoal(&c.description));
            if let Some(x) = sub.as_ref().and_then(|s| expand(s, entry, &here)) {
                if let Some(op) = location_belief(brief, &x.learned) {
                    ops.push(op);
                }
                reason = Some(if entry.rationale.is_empty() { format!("from memory {}", entry.id) } else { entry.rationale.clone() });
                descriptors = descriptor_words(entry, &x.action);
                if descriptors.is_empty() {
                    descriptors = words(&state.observation)
                        .into_iter()
                        .filter(|w| OBJECTS.contains(&w.as_str()) || LOCATIONS.contains(&w.as_str()))
                        .collect();
                }
                let ctx_text = brief.current_subgoal.as_ref().map(|c| c.description.clone()).unwrap_or_default();
                hidden = Some(self.encoder.encode(&self.vocab, &descriptors, &ctx_text));
                guidance = Some(x.action);
            }
        }
        if guidance.is_none() && !ops.is_empty() {
            reason = Some("subgoal completed".into());
        }
        let output = CompiledOutput::from_parts(guidance, reason, BriefDelta::new(ops));
        let n = self.encoder.n_soft();
        let descriptors: Vec<String> =
            if descriptors.is_empty() { vec![] } else { (0..n).map(|i| descriptors[i % descriptors.len()].clone()).collect() };
        Compiled { output, hidden, decision: Some(Decision { folds: ctx.folds, select: Some(sel) }), descriptors }
    }

    /// Compile with a caller-fixed decision (teacher forcing).
    pub fn compile_with(&self, state: &RuntimeState, pool: &CandidatePool, decision: &Decision) -> Compiled<T> {
        let ctx = self.fold_chain(state, |_, i| decision.folds.get(i).is_some_and(|f| f.folded));
        let mut sel = self.select_step(state, pool, &ctx.brief_after);
        sel.chosen = decision.select.as_ref().map_or(sel.entries.len(), |s| s.chosen.min(sel.entries.len()));
        self.realize(state, pool, ctx, sel)
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl<T: Scalar> CompilerBackend<T> for LearnedCompiler<T> {
    fn name(&self) -> &'static str {
        "learned"
    }

    fn compile(
        &self,
        state: &RuntimeState,
        pool: &CandidatePool,
        _probe: Option<&dyn GroundTruth>,
        rng: &mut ChaCha8Rng,
    ) -> Compiled<T> {
        if let Some(a) = state.looping_action() {
            let out = CompiledOutput::from_parts(Some(loop_directive(a)), Some("loop detected".into()), None);
            return Compiled::plain(out);
        }
        let tau = self.temperature;
        let greedy = tau <= 0.0;
        let ctx = self.fold_chain(state, |step, _| {
            let z = fold_logit(&self.params, step).as_f64();
            if greedy {
                z > 0.0
            } else {
                let p = 1.0 / (1.0 + (-z / tau).exp());
                rng.random::<f64>() < p
            }
        });
        let mut sel = self.select_step(state, pool, &ctx.brief_after);
        let scores: Vec<f64> = select_scores(&self.params, &sel).iter().map(|s| s.as_f64()).collect();
        sel.chosen = if greedy {
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
            sample_index(&softmax(&scaled), rng)
        };
        self.realize(state, pool, ctx, sel)
    }
}

/// Probability of each select option (pool entries then NOACTION).
pub fn select_probs<T: Scalar>(p: &CompilerParams<T>, step: &SelectStep, temperature: f64) -> Vec<f64> {
    let s: Vec<f64> = select_scores(p, step).iter().map(|x| x.as_f64() / temperature.max(1e-6)).collect();
    log_softmax(&s).into_iter().map(f64::exp).collect()
}
