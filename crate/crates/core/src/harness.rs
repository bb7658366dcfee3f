//! Episode loop in three modes plus the measurements built on its traces.
//!
//! - `no_mem`: the executor sees the system line and the observation.
//! - `ammi`: every retrieved entry is rendered into MEMORY once, at step 0.
//! - `scmc`: the compiler runs every step; only its guidance (and soft tokens
//!   from the learned backend) reach the executor.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::brief::{apply_lenient, init_brief, render_brief, BriefState};
use crate::compiler::{CompiledOutput, CompilerBackend, Decision, RuntimeState};
use crate::env::{self, Action, EnvError, House, TaskSpec};
use crate::executor::{self, ExecutorParams, SeqBuilder, Segment, TokenSequence, Vocab};
use crate::linalg::{mean_rows, Mat};
use crate::memory::{render_pool, CandidatePool, MemoryBank};
use crate::scalar::Scalar;
use crate::softmem::{project_mean, project_sample, SoftMemParams};

pub const TRACE_SCHEMA: u32 = 1;
pub const SYSTEM_LINE: &str = "you are a household agent. choose the next action for the task.";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("executor: {0}")]
    Executor(#[from] executor::ExecutorError),
    #[error("mode {0} needs a memory bank")]
    MissingBank(Mode),
    #[error("mode {0} needs a compiler backend")]
    MissingBackend(Mode),
    #[error("no traces for mode {0}")]
    MissingMode(Mode),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoMem,
    Ammi,
    Scmc,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NoMem, Mode::Ammi, Mode::Scmc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::NoMem => "no_mem",
            Mode::Ammi => "ammi",
            Mode::Scmc => "scmc",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "no_mem" | "nomem" | "no-mem" => Ok(Mode::NoMem),
            "ammi" => Ok(Mode::Ammi),
            "scmc" => Ok(Mode::Scmc),
            other => Err(HarnessError::UnknownMode(other.to_string())),
        }
    }
}

/// Executor input segments in text form, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentText {
    pub segment: Segment,
    pub text: String,
    pub age: u32,
}

/// Soft channel inputs needed to rebuild the soft tokens of one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftSpec {
    pub descriptors: Vec<String>,
    pub context: String,
    pub guidance: String,
}

/// Builds the token sequence for rendered segments plus `n_soft` soft slots.
pub fn build_sequence(vocab: &Vocab, segments: &[SegmentText], n_soft: usize) -> TokenSequence {
    let mut b = SeqBuilder::new(vocab);
    for s in segments {
        if s.segment == Segment::Obs && n_soft > 0 {
            b = b.soft(n_soft, 0);
        }
        b = b.text(s.segment, &s.text, s.age);
    }
    b.finish()
}

/// Segments seen by the executor at step `t` of an episode.
pub fn render_input(mode: Mode, t: u32, observation: &str, pool: &CandidatePool, guidance: Option<&str>) -> Vec<SegmentText> {
    let mut v = vec![SegmentText { segment: Segment::Sys, text: SYSTEM_LINE.into(), age: t }];
    match mode {
        Mode::NoMem => {}
        Mode::Ammi => v.push(SegmentText { segment: Segment::Memory, text: render_pool(pool, true), age: t }),
        Mode::Scmc => {
            if let Some(g) = guidance {
                v.push(SegmentText { segment: Segment::Memory, text: g.to_string(), age: 0 });
            }
        }
    }
    v.push(SegmentText { segment: Segment::Obs, text: observation.to_string(), age: 0 });
    v
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub compiler_in: usize,
    pub compiler_out: usize,
    pub exec_in: usize,
    pub exec_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenRecord {
    pub soft: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub observation: String,
    pub compiled: Option<CompiledOutput>,
    pub exec_input: Vec<SegmentText>,
    pub soft_tokens: usize,
    pub action: String,
    pub valid: bool,
    pub tokens: TokenCounts,
    pub memory_attention: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<HiddenRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub schema: u32,
    pub task_id: String,
    pub house: String,
    pub mode: Mode,
    pub backend: Option<String>,
    pub seed: u64,
    pub success: bool,
    pub steps: Vec<StepRecord>,
    pub final_brief: Option<BriefState>,
}

impl EpisodeTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Wall-clock seconds per call; kept out of the trace so traces stay reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTiming {
    pub compiler_secs: Vec<f64>,
    pub executor_secs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub max_steps: u32,
    pub retrieve_k: usize,
    /// Executor sampling temperature; 0 is greedy.
    pub exec_temperature: f64,
    pub exec_top_k: usize,
    /// Sample soft-token noise at run time instead of using the mean.
    pub sample_soft: bool,
    pub record_hiddens: bool,
    /// Retrieve only successful entries.
    pub successes_only: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: env::DEFAULT_MAX_STEPS,
            retrieve_k: 3,
            exec_temperature: 0.0,
            exec_top_k: 0,
            sample_soft: false,
            record_hiddens: false,
            successes_only: false,
        }
    }
}

/// How actions are chosen each step.
pub enum Actor<'a, T: Scalar> {
    /// The trained executor policy.
    Executor { params: &'a ExecutorParams<T>, softmem: Option<&'a SoftMemParams<T>> },
    /// Teacher: follows parseable guidance, otherwise the privileged planner,
    /// with probability `noise` of a uniformly random action.
    Teacher { noise: f64 },
}

pub struct Agent<'a, T: Scalar> {
    pub vocab: &'a Vocab,
    pub actor: Actor<'a, T>,
    pub backend: Option<&'a dyn CompilerBackend<T>>,
    /// Give the backend privileged ground truth (teacher data generation only).
    pub privileged: bool,
}

/// Everything produced by one episode.
pub struct EpisodeRun {
    pub trace: EpisodeTrace,
    pub timing: EpisodeTiming,
    pub decisions: Vec<Option<Decision>>,
    /// Per step: soft-channel inputs (learned backend only).
    pub soft_specs: Vec<Option<SoftSpec>>,
    /// Per step: the oracle-style privileged world state before acting.
    pub worlds: Vec<env::WorldState>,
}

fn count_tokens(vocab: &Vocab, text: &str) -> usize {
    vocab.tokenize(text).len()
}

fn compiled_text(out: &CompiledOutput) -> String {
    let mut s = String::from(out.variant.as_str());
    if let Some(g) = &out.guidance {
        s.push(' ');
        s.push_str(g);
    }
    if let Some(r) = &out.reason {
        s.push(' ');
        s.push_str(r);
    }
    if let Some(d) = &out.delta {
        s.push(' ');
        s.push_str(&serde_json::to_string(d).unwrap_or_default());
    }
    s
}

pub fn run_episode<T: Scalar>(
    spec: &TaskSpec,
    house: &House,
    bank: Option<&MemoryBank>,
    mode: Mode,
    agent: &Agent<'_, T>,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeRun, HarnessError> {
    if mode != Mode::NoMem && bank.is_none() {
        return Err(HarnessError::MissingBank(mode));
    }
    if mode == Mode::Scmc && agent.backend.is_none() {
        return Err(HarnessError::MissingBackend(mode));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut world, mut obs, plan) = env::reset_with(spec, house, seed, cfg.max_steps)?;
    let pool = match bank {
        Some(b) if mode != Mode::NoMem => {
            if cfg.successes_only {
                b.retrieve_filtered(&spec.goal, cfg.retrieve_k, |e| e.outcome == crate::memory::Outcome::Success)
            } else {
                b.retrieve(&spec.goal, cfg.retrieve_k)
            }
        }
        _ => CandidatePool::default(),
    };
    let brief = init_brief(&spec.goal, &plan).ok();
    let mut rt = brief.map(|b| RuntimeState::new(obs.clone(), b));

    let mut steps = Vec::new();
    let mut timing = EpisodeTiming::default();
    let mut decisions = Vec::new();
    let mut soft_specs = Vec::new();
    let mut worlds = Vec::new();
    let mut t: u32 = 0;
    while !world.done {
        worlds.push(world.clone());
        let mut compiled = None;
        let mut hidden = None;
        let mut decision = None;
        let mut soft_spec = None;
        let mut counts = TokenCounts::default();
        if mode == Mode::Scmc {
            if let (Some(backend), Some(rt)) = (agent.backend, rt.as_mut()) {
                rt.observation = obs.clone();
                rt.step = t;
                rt.brief = rt.brief.clone().at_step(t);
                let probe: Option<&dyn env::GroundTruth> = if agent.privileged { Some(&world) } else { None };
                let start = Instant::now();
                let c = backend.compile(rt, &pool, probe, &mut rng);
                timing.compiler_secs.push(start.elapsed().as_secs_f64());
                counts.compiler_in = count_tokens(agent.vocab, &render_brief(&rt.brief))
                    + count_tokens(agent.vocab, &render_pool(&pool, false))
                    + count_tokens(agent.vocab, &obs);
                counts.compiler_out = count_tokens(agent.vocab, &compiled_text(&c.output));
                if let Some(d) = &c.output.delta {
                    let (next, skipped) = apply_lenient(d, &rt.brief);
                    for (i, e) in skipped {
                        warn!(op = i, error = %e, "brief op skipped");
                    }
                    rt.brief = next;
                }
                if let (Some(h), Some(g)) = (&c.hidden, &c.output.guidance) {
                    let ctx = rt.brief.current_subgoal.as_ref().map(|s| s.description.clone()).unwrap_or_default();
                    soft_spec = Some(SoftSpec { descriptors: c.descriptors.clone(), context: ctx, guidance: g.clone() });
                    hidden = Some(h.clone());
                }
                decision = c.decision.clone();
                compiled = Some(c.output);
            }
        }
        let guidance = compiled.as_ref().and_then(|c| c.guidance.as_deref());
        let segments = render_input(mode, t, &obs, &pool, guidance);

        let start = Instant::now();
        let (action, stat, n_soft, seq_len, hid_rec) = match &agent.actor {
            Actor::Executor { params, softmem } => {
                let soft = match (&hidden, softmem) {
                    (Some(h), Some(sm)) => {
                        let h: Mat<T> = h.clone();
                        let s = if cfg.sample_soft { project_sample(&h, sm, &mut rng) } else { project_mean(&h, sm) };
                        s.ok()
                    }
                    _ => None,
                };
                let n_soft = soft.as_ref().map_or(0, |s| s.values.rows());
                let seq = build_sequence(agent.vocab, &segments, n_soft);
                let out = executor::forward(&seq, soft.as_ref().map(|s| &s.values), params)?;
                let id = executor::act(&out.action_logits, cfg.exec_temperature, cfg.exec_top_k, &mut rng);
                let action = Action::from_id(id).map(|a| a.to_string()).unwrap_or_default();
                let stat = executor::memory_attention_stat(&out, &seq).ok().map(|v| v.as_f64());
                let hid_rec = match (&soft, guidance) {
                    (Some(s), Some(g)) if cfg.record_hiddens => {
                        let text = agent
                            .vocab
                            .tokenize(g)
                            .iter()
                            .map(|&id| params.embed.row(id).iter().map(|v| v.as_f64()).collect())
                            .collect();
                        let soft_rows = (0..s.values.rows())
                            .map(|r| s.values.row(r).iter().map(|v| v.as_f64()).collect())
                            .collect();
                        Some(HiddenRecord { soft: soft_rows, text })
                    }
                    _ => None,
                };
                (action, stat, n_soft, seq.len(), hid_rec)
            }
            Actor::Teacher { noise } => {
                use rand::Rng;
                let follow = guidance.and_then(Action::parse);
                let chosen = if rng.random::<f64>() < *noise {
                    Some(env::random_action(&mut rng))
                } else {
                    follow.or_else(|| env::golden_action(&world))
                };
                let seq = build_sequence(agent.vocab, &segments, 0);
                (chosen.map(|a| a.to_string()).unwrap_or_else(|| "goto desk".into()), None, 0, seq.len(), None)
            }
        };
        timing.executor_secs.push(start.elapsed().as_secs_f64());
        counts.exec_in = seq_len;
        counts.exec_out = count_tokens(agent.vocab, &action);

        let r = env::step(&world, &action);
        if let Some(rt) = rt.as_mut() {
            rt.push_action(&action);
        }
        steps.push(StepRecord {
            t,
            observation: obs.clone(),
            compiled,
            exec_input: segments,
            soft_tokens: n_soft,
            action,
            valid: r.valid,
            tokens: counts,
            memory_attention: stat,
            hidden: hid_rec,
        });
        decisions.push(decision);
        soft_specs.push(soft_spec);
        world = r.state;
        obs = r.observation;
        t += 1;
    }
    let trace = EpisodeTrace {
        schema: TRACE_SCHEMA,
        task_id: spec.id.clone(),
        house: spec.house.clone(),
        mode,
        backend: (mode == Mode::Scmc).then(|| agent.backend.map(|b| b.name().to_string())).flatten(),
        seed,
        success: world.success,
        steps,
        final_brief: rt.map(|r| r.brief),
    };
    Ok(EpisodeRun { trace, timing, decisions, soft_specs, worlds })
}

/// One point of an attention-by-step curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u32,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean memory-attention stat per step index across traces; steps without
/// memory tokens are skipped.
pub fn attention_curve(traces: &[EpisodeTrace]) -> Vec<CurvePoint> {
    let horizon = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for s in 0..horizon {
        let vals: Vec<f64> = traces.iter().filter_map(|t| t.steps.get(s).and_then(|r| r.memory_attention)).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        out.push(CurvePoint { step: s as u32, mean, stderr: (var / n).sqrt(), n: vals.len() });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_exec_in: f64,
    pub mean_exec_out: f64,
    pub mean_compiler_in: f64,
    pub mean_compiler_out: f64,
    /// Wall-clock means; kept out of the serialized report (see `latency_json`).
    #[serde(skip_serializing, default)]
    pub mean_exec_latency: f64,
    #[serde(skip_serializing, default)]
    pub mean_compiler_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ModeRow>,
    pub attention: Vec<(Mode, Vec<CurvePoint>)>,
}

impl RunReport {
    pub fn row(&self, mode: Mode) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn curve(&self, mode: Mode) -> Option<&[CurvePoint]> {
        self.attention.iter().find(|(m, _)| *m == mode).map(|(_, c)| c.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "mode,episodes,success_rate,mean_steps,mean_exec_in,mean_exec_out,mean_compiler_in,mean_compiler_out\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.mode,
                r.episodes,
                r.success_rate,
                r.mean_steps,
                r.mean_exec_in,
                r.mean_exec_out,
                r.mean_compiler_in,
                r.mean_compiler_out
            ));
        }
        s
    }

    /// Per-mode latency means, for the timing sidecar.
    pub fn latency_json(&self) -> serde_json::Value {
        let rows: serde_json::Map<String, serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let v = serde_json::json!({
                    "mean_exec_latency_s": r.mean_exec_latency,
                    "mean_compiler_latency_s": r.mean_compiler_latency,
                });
                (r.mode.to_string(), v)
            })
            .collect();
        serde_json::Value::Object(rows)
    }

    pub fn attention_csv(&self) -> String {
        let mut s = String::from("mode,step,mean,stderr,n\n");
        for (m, c) in &self.attention {
            for p in c {
                s.push_str(&format!("{m},{},{:.6},{:.6},{}\n", p.step, p.mean, p.stderr, p.n));
            }
        }
        s
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-mode aggregates for every mode in `modes`. Token and latency means are
/// per call (per step). `timings` may be empty; it is matched to `traces` by index.
pub fn efficiency_report(
    traces: &[EpisodeTrace],
    timings: &[EpisodeTiming],
    modes: &[Mode],
) -> Result<RunReport, HarnessError> {
    let mut rows = Vec::new();
    let mut attention = Vec::new();
    for &m in modes {
        let idx: Vec<usize> = (0..traces.len()).filter(|&i| traces[i].mode == m).collect();
        if idx.is_empty() {
            return Err(HarnessError::MissingMode(m));
        }
        let ts: Vec<&EpisodeTrace> = idx.iter().map(|&i| &traces[i]).collect();
        let steps = || ts.iter().flat_map(|t| t.steps.iter());
        let tm: Vec<&EpisodeTiming> = idx.iter().filter_map(|&i| timings.get(i)).collect();
        rows.push(ModeRow {
            mode: m,
            episodes: ts.len(),
            success_rate: ts.iter().filter(|t| t.success).count() as f64 / ts.len() as f64,
            mean_steps: mean(ts.iter().map(|t| t.steps.len() as f64)),
            mean_exec_in: mean(steps().map(|s| s.tokens.exec_in as f64)),
            mean_exec_out: mean(steps().map(|s| s.tokens.exec_out as f64)),
            mean_compiler_in: mean(steps().map(|s| s.tokens.compiler_in as f64)),
            mean_compiler_out: mean(steps().map(|s| s.tokens.compiler_out as f64)),
            mean_exec_latency: mean(tm.iter().flat_map(|t| t.executor_secs.iter().copied())),
            mean_compiler_latency: mean(tm.iter().flat_map(|t| t.compiler_secs.iter().copied())),
        });
        let owned: Vec<EpisodeTrace> = ts.into_iter().cloned().collect();
        attention.push((m, attention_curve(&owned)));
    }
    Ok(RunReport { rows, attention })
}

/// Writes one CSV row per recorded hidden vector: episode, step, channel, values.
pub fn export_hiddens(traces: &[EpisodeTrace], path: &Path) -> Result<usize, HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let width = traces
        .iter()
        .flat_map(|t| t.steps.iter())
        .find_map(|s| s.hidden.as_ref().and_then(|h| h.soft.first().map(Vec::len)))
        .unwrap_or(0);
    let dims: Vec<String> = (0..width).map(|i| format!("d{i}")).collect();
    writeln!(f, "episode,step,channel,{}", dims.join(","))?;
    let mut rows = 0;
    for (e, t) in traces.iter().enumerate() {
        for s in &t.steps {
            let Some(h) = &s.hidden else { continue };
            for (label, block) in [("soft", &h.soft), ("text", &h.text)] {
                for v in block {
                    let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
                    writeln!(f, "{e},{},{label},{}", s.t, vals.join(","))?;
                    rows += 1;
                }
            }
        }
    }
    f.flush()?;
    Ok(rows)
}

/// Mean executor embedding of the guidance tokens (the text-channel summary).
pub fn text_mean<T: Scalar>(vocab: &Vocab, params: &ExecutorParams<T>, guidance: &str) -> Vec<T> {
    let ids = vocab.tokenize(guidance);
    let m = Mat::from_fn(ids.len(), params.d_base(), |r, c| params.embed.get(ids[r], c));
    mean_rows(&m)
}
