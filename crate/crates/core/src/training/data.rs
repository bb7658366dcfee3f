//! Per-house memory banks and teacher-generated supervision.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::brief::{apply_lenient, init_brief};
use crate::compiler::learned::LearnedCompiler;
use crate::compiler::oracle::OracleCompiler;
use crate::compiler::{Decision, RuntimeState};
use crate::env::{self, golden_action, golden_rollout, Action, Catalog, House, TaskSpec};
use crate::harness::{render_input, Mode, SegmentText, SoftSpec};
use crate::memory::{MemoryBank, TrajectoryStep};
use crate::scalar::Scalar;

use super::TrainError;

/// One executor target plus, for compiler-formatted inputs, the compiler's
/// decision label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub mode: Mode,
    pub segments: Vec<SegmentText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<SoftSpec>,
    pub target: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

pub fn write_jsonl(samples: &[SftSample], path: &Path) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(f, "{}", serde_json::to_string(s).expect("sample serializes"))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SftSample>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TrainError::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenConfig {
    pub episodes_per_task: usize,
    /// Probability of executing a random action instead of the teacher's.
    pub teacher_noise: f64,
    pub retrieve_k: usize,
    pub max_steps: u32,
    pub formats: Vec<Mode>,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            episodes_per_task: 6,
            teacher_noise: 0.15,
            retrieve_k: 3,
            max_steps: env::DEFAULT_MAX_STEPS,
            formats: Mode::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// One successful expert trajectory per task of `house`, keyed by task id.
pub fn build_bank(catalog: &Catalog, house: &str, seed: u64) -> Result<MemoryBank, TrainError> {
    let h = catalog.house(house).ok_or_else(|| TrainError::UnknownHouse(house.to_string()))?;
    let mut bank = MemoryBank::default();
    for (i, spec) in catalog.tasks_in(house).enumerate() {
        let (start, obs, _) = env::reset(spec, h, seed.wrapping_add(i as u64))?;
        let (traj, end) = golden_rollout(&start, &obs);
        if !end.success || traj.is_empty() {
            continue;
        }
        let object = &spec.target.object;
        let rationale = format!("the {object} was in the {}", h.home(object).unwrap_or("house"));
        let steps = traj.into_iter().map(|(observation, action)| TrajectoryStep { observation, action }).collect();
        let tags = vec![spec.family.as_str().to_string(), object.clone()];
        bank.record_episode(&spec.id, &spec.goal, steps, true, &rationale, tags)?;
    }
    Ok(bank)
}

/// Runs the guidance-following teacher once and returns the samples of a
/// successful episode (empty on failure).
fn teacher_episode<T: Scalar>(
    spec: &TaskSpec,
    house: &House,
    bank: &MemoryBank,
    learned: &LearnedCompiler<T>,
    cfg: &DataGenConfig,
    seed: u64,
) -> Result<Vec<SftSample>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ea_c4e5);
    let (mut world, mut obs, plan) = env::reset_with(spec, house, seed, cfg.max_steps)?;
    let pool = bank.retrieve(&spec.goal, cfg.retrieve_k);
    let brief = init_brief(&spec.goal, &plan).map_err(|e| TrainError::Parse { line: 0, msg: e.to_string() })?;
    let mut rt = RuntimeState::new(obs.clone(), brief);
    let mut out = Vec::new();
    let mut t = 0u32;
    while !world.done {
        rt.observation = obs.clone();
        rt.step = t;
        let (compiled, label) = OracleCompiler.teach(&rt, &pool, Some(&world));
        let decision = learned.label_decision(&rt, &pool, &label);
        let soft = decision.as_ref().and_then(|d| {
            let c = learned.compile_with(&rt, &pool, d);
            let g = c.output.guidance?;
            c.hidden.as_ref()?;
            let ctx = c.output.delta.as_ref().map_or_else(
                || rt.brief.clone(),
                |delta| apply_lenient(delta, &rt.brief).0,
            );
            let context = ctx.current_subgoal.map(|s| s.description).unwrap_or_default();
            Some(SoftSpec { descriptors: c.descriptors, context, guidance: g })
        });
        let guidance = compiled.guidance.as_deref();
        let clean = guidance.and_then(Action::parse).or_else(|| golden_action(&world));
        let Some(target) = clean else { break };
        for &mode in &cfg.formats {
            out.push(SftSample {
                mode,
                segments: render_input(mode, t, &obs, &pool, guidance),
                soft: if mode == Mode::Scmc { soft.clone() } else { None },
                target: target.id(),
                decision: if mode == Mode::Scmc { decision.clone() } else { None },
            });
        }
        if let Some(d) = &compiled.delta {
            rt.brief = apply_lenient(d, &rt.brief).0;
        }
        let executed = if rng.random::<f64>() < cfg.teacher_noise { env::random_action(&mut rng) } else { target };
        let text = executed.to_string();
        let r = env::step(&world, &text);
        rt.push_action(&text);
        world = r.state;
        obs = r.observation;
        t += 1;
    }
    Ok(if world.success { out } else { vec![] })
}

/// Teacher episodes over every task of `houses`, each house using its own bank.
/// Output order depends only on the inputs.
pub fn generate_sft_data<T: Scalar>(
    catalog: &Catalog,
    houses: &[String],
    banks: &[MemoryBank],
    learned: &LearnedCompiler<T>,
    cfg: &DataGenConfig,
) -> Result<Vec<SftSample>, TrainError> {
    let mut jobs = Vec::new();
    for (hi, name) in houses.iter().enumerate() {
        let house = catalog.house(name).ok_or_else(|| TrainError::UnknownHouse(name.clone()))?;
        for spec in catalog.tasks_in(name) {
            for e in 0..cfg.episodes_per_task {
                let seed = cfg.seed ^ crate::text::fnv1a(format!("{}#{e}", spec.id).as_bytes());
                jobs.push((spec, house, hi, seed));
            }
        }
    }
    let chunks: Vec<Vec<SftSample>> = jobs
        .par_iter()
        .map(|(spec, house, hi, seed)| teacher_episode(spec, house, &banks[*hi], learned, cfg, *seed))
        .collect::<Result<_, _>>()?;
    let kept = chunks.iter().filter(|c| !c.is_empty()).count();
    info!(episodes = jobs.len(), kept, "teacher data generated");
    Ok(chunks.into_iter().flatten().collect())
}
