//! Artifact-producing commands: data generation, SFT, GRPO, evaluation and
//! the three-mode comparison. Everything lands under `paths.out_dir`.
//!
//! Layout:
//! ```text
//! catalog.json            banks/<house>.jsonl       sft_data.jsonl
//! checkpoints/sft.{bin,json}   checkpoints/grpo.{bin,json}
//! sft_loss.csv  grpo_reward.csv
//! traces/<mode>/<idx>.json (+ .timing.json)
//! report.json  report.csv  attention.csv  hiddens.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::compiler::learned::{CompilerEncoder, CompilerParams, LearnedCompiler};
use crate::compiler::oracle::OracleCompiler;
use crate::compiler::remote::{RemoteCompiler, RemoteConfig, RemoteError};
use crate::compiler::CompilerBackend;
use crate::env::{Catalog, TaskSpec};
use crate::executor::{ExecutorConfig, Vocab};
use crate::harness::{
    efficiency_report, export_hiddens, run_episode, Actor, Agent, EpisodeConfig, EpisodeTiming, EpisodeTrace,
    HarnessError, Mode, RunReport,
};
use crate::memory::{MemoryBank, MemoryError};
use crate::params::{CheckpointError, CheckpointReader, CheckpointWriter};
use crate::training::data::{read_jsonl, write_jsonl};
use crate::training::grpo::{self, Rollout, RolloutEnv};
use crate::training::sft::{self, PreparedSample};
use crate::training::{
    build_bank, generate_sft_data, run_grpo, run_sft, DataGenConfig, GrpoConfig, SftConfig, SftModel, TrainError,
};

/// Scalar type used by the command pipeline.
pub type F = f64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("io at {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error("remote backend: {0}")]
    Remote(#[from] RemoteError),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Existing catalog; generated from `world` when absent.
    pub catalog: Option<PathBuf>,
    /// Directory of `<house>.jsonl` banks; built from expert rollouts when absent.
    pub banks: Option<PathBuf>,
    /// Checkpoint stem used by eval/compare; defaults to the newest in `out_dir`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default"), catalog: None, banks: None, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub train_houses: Vec<String>,
    pub eval_houses: Vec<String>,
    pub tasks_per_house: usize,
    pub distractors: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            train_houses: vec!["h0".into(), "h1".into(), "h2".into(), "h3".into()],
            eval_houses: vec!["eval0".into()],
            tasks_per_house: 12,
            distractors: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub executor: ExecutorConfig,
    pub d_mc: usize,
    pub n_soft: usize,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { executor: ExecutorConfig::default(), d_mc: 32, n_soft: 16, encoder_seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Oracle,
    Learned,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_mode: usize,
    pub modes: Vec<Mode>,
    pub backend: BackendKind,
    pub episode: EpisodeConfig,
    pub export_hiddens: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_mode: 200,
            modes: Mode::ALL.to_vec(),
            backend: BackendKind::Learned,
            episode: EpisodeConfig::default(),
            export_hiddens: false,
        }
    }
}

/// Full configuration of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Episode and rollout parallelism; 1 keeps everything bit-reproducible.
    pub workers: usize,
    pub paths: Paths,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub data: DataGenConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub remote: RemoteConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            data: DataGenConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
            remote: RemoteConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Checks referenced paths and basic ranges.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.world.train_houses.is_empty() || self.world.eval_houses.is_empty() {
            return bad("train_houses and eval_houses must be non-empty");
        }
        if self.world.train_houses.iter().any(|h| self.world.eval_houses.contains(h)) {
            return bad("train and eval houses overlap");
        }
        if self.eval.modes.is_empty() {
            return bad("mode list is empty");
        }
        if self.model.n_soft == 0 || self.model.d_mc == 0 {
            return bad("n_soft and d_mc must be positive");
        }
        for p in [&self.paths.catalog, &self.paths.banks].into_iter().flatten() {
            if !p.exists() {
                return Err(PipelineError::MissingArtifact(p.clone()));
            }
        }
        if let Some(stem) = &self.paths.checkpoint {
            let json = crate::params::with_ext(stem, "json");
            if !json.exists() {
                return Err(PipelineError::MissingArtifact(json));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::minihouse(self.model.executor.hash_buckets)
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.paths.out_dir.join(rel)
    }

    fn all_houses(&self) -> Vec<String> {
        self.world.train_houses.iter().chain(&self.world.eval_houses).cloned().collect()
    }

    fn with_workers<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))?;
        Ok(pool.install(f))
    }

    /// Human-readable plan for `--dry-run`.
    pub fn plan(&self, command: &str) -> Vec<String> {
        let o = |r: &str| self.out(r).display().to_string();
        let mut v = vec![format!("command {command}, seed {}, workers {}", self.seed, self.workers)];
        match command {
            "gen-data" => {
                v.push(format!("catalog -> {}", o("catalog.json")));
                v.push(format!("banks for {:?} -> {}", self.all_houses(), o("banks")));
                v.push(format!(
                    "{} teacher episodes per task over {:?} -> {}",
                    self.data.episodes_per_task,
                    self.world.train_houses,
                    o("sft_data.jsonl")
                ));
            }
            "sft" => v.push(format!(
                "{} epochs, batch {} -> {} and {}",
                self.sft.epochs,
                self.sft.batch_size,
                o("checkpoints/sft"),
                o("sft_loss.csv")
            )),
            "grpo" => v.push(format!(
                "{} updates, G={}, {} tasks/update -> {} and {}",
                self.grpo.updates,
                self.grpo.group_size,
                self.grpo.tasks_per_update,
                o("checkpoints/grpo"),
                o("grpo_reward.csv")
            )),
            _ => v.push(format!(
                "{} episodes per mode for {:?} on {:?}, backend {:?} -> {}",
                self.eval.episodes_per_mode,
                self.eval.modes,
                self.world.eval_houses,
                self.eval.backend,
                o("traces")
            )),
        }
        v
    }
}

fn ensure_dir(p: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(p).map_err(io_err(p))
}

fn write_text(p: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(d) = p.parent() {
        ensure_dir(d)?;
    }
    fs::write(p, text).map_err(io_err(p))
}

/// Catalog from `paths.catalog`, else `out_dir/catalog.json`, else generated.
pub fn load_or_make_catalog(cfg: &PipelineConfig) -> Result<Catalog, PipelineError> {
    if let Some(p) = &cfg.paths.catalog {
        return Ok(Catalog::load(p)?);
    }
    let p = cfg.out("catalog.json");
    if p.exists() {
        return Ok(Catalog::load(&p)?);
    }
    let houses = cfg.all_houses();
    let names: Vec<&str> = houses.iter().map(String::as_str).collect();
    let catalog = Catalog::generate(&names, cfg.world.tasks_per_house, cfg.world.distractors, cfg.seed);
    ensure_dir(&cfg.paths.out_dir)?;
    catalog.save(&p)?;
    Ok(catalog)
}

fn bank_path(cfg: &PipelineConfig, house: &str) -> PathBuf {
    cfg.paths.banks.clone().unwrap_or_else(|| cfg.out("banks")).join(format!("{house}.jsonl"))
}

/// Loads each house's bank, building missing ones from expert rollouts.
pub fn load_or_make_banks(cfg: &PipelineConfig, catalog: &Catalog, houses: &[String]) -> Result<Vec<MemoryBank>, PipelineError> {
    houses
        .iter()
        .map(|h| {
            let p = bank_path(cfg, h);
            if p.exists() {
                let mut b = MemoryBank::load(&p)?;
                b.path = None;
                return Ok(b);
            }
            let b = build_bank(catalog, h, cfg.seed ^ 0xba4c)?;
            if let Some(d) = p.parent() {
                ensure_dir(d)?;
            }
            b.save(&p)?;
            Ok(b)
        })
        .collect()
}

pub fn learned_template(cfg: &PipelineConfig) -> LearnedCompiler<F> {
    LearnedCompiler::new(cfg.vocab(), cfg.model.d_mc, cfg.model.n_soft, cfg.model.encoder_seed)
}

pub fn encoder(cfg: &PipelineConfig) -> CompilerEncoder<F> {
    learned_template(cfg).encoder
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub tasks: usize,
    pub bank_sizes: Vec<(String, usize)>,
    pub samples: usize,
}

pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<GenDataSummary, PipelineError> {
    cfg.validate()?;
    let catalog = load_or_make_catalog(cfg)?;
    let houses = cfg.all_houses();
    let banks = load_or_make_banks(cfg, &catalog, &houses)?;
    let n_train = cfg.world.train_houses.len();
    let learned = learned_template(cfg);
    let mut data_cfg = cfg.data.clone();
    data_cfg.seed ^= cfg.seed;
    let samples = cfg.with_workers(|| {
        generate_sft_data(&catalog, &cfg.world.train_houses, &banks[..n_train], &learned, &data_cfg)
    })??;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    write_jsonl(&samples, &cfg.out("sft_data.jsonl"))?;
    info!(samples = samples.len(), "dataset written");
    Ok(GenDataSummary {
        tasks: catalog.tasks.len(),
        bank_sizes: houses.iter().cloned().zip(banks.iter().map(MemoryBank::len)).collect(),
        samples: samples.len(),
    })
}

/// Writes the full stack under `stem`.
pub fn save_model(model: &SftModel<F>, stem: &Path, meta: serde_json::Value) -> Result<(), PipelineError> {
    if let Some(d) = stem.parent() {
        ensure_dir(d)?;
    }
    let mut w = CheckpointWriter::default();
    w.add("compiler", &model.compiler);
    w.add("executor", &model.executor);
    w.add("softmem", &model.softmem);
    w.write::<F>(stem, meta)?;
    Ok(())
}

pub fn load_model(cfg: &PipelineConfig, stem: &Path) -> Result<SftModel<F>, PipelineError> {
    let json = crate::params::with_ext(stem, "json");
    if !json.exists() {
        return Err(PipelineError::MissingArtifact(json));
    }
    let r = CheckpointReader::open(stem)?;
    let mut model = SftModel::init(&cfg.vocab(), &cfg.model.executor, cfg.model.d_mc, 0);
    r.fill("compiler", &mut model.compiler)?;
    r.fill("executor", &mut model.executor)?;
    r.fill("softmem", &mut model.softmem)?;
    Ok(model)
}

pub fn cmd_sft(cfg: &PipelineConfig) -> Result<Vec<sft::SftLogRow>, PipelineError> {
    cfg.validate()?;
    let data = cfg.out("sft_data.jsonl");
    if !data.exists() {
        return Err(PipelineError::MissingArtifact(data));
    }
    let samples = read_jsonl(&data)?;
    let vocab = cfg.vocab();
    let enc = encoder(cfg);
    let prepared: Vec<PreparedSample<F>> = samples.iter().map(|s| PreparedSample::prepare(s, &vocab, &enc)).collect();
    let mut model = SftModel::init(&vocab, &cfg.model.executor, cfg.model.d_mc, cfg.seed ^ 0x5f7);
    let mut sft_cfg = cfg.sft.clone();
    sft_cfg.seed ^= cfg.seed;
    let rows = cfg.with_workers(|| run_sft(&mut model, &prepared, &sft_cfg, |_| {}))??;
    write_text(&cfg.out("sft_loss.csv"), &sft::log_csv(&rows))?;
    save_model(&model, &cfg.out("checkpoints/sft"), serde_json::json!({"stage": "sft", "steps": rows.len()}))?;
    Ok(rows)
}

/// GRPO environment over MiniHouse tasks with a frozen executor.
pub struct MiniHouseRollouts<'a> {
    pub tasks: Vec<(&'a TaskSpec, &'a crate::env::House, &'a MemoryBank)>,
    pub model: &'a SftModel<F>,
    pub template: &'a LearnedCompiler<F>,
    pub vocab: &'a Vocab,
    pub episode: EpisodeConfig,
}

impl RolloutEnv<F> for MiniHouseRollouts<'_> {
    fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn rollout(&self, params: &CompilerParams<F>, task: usize, temperature: f64, seed: u64) -> Result<Rollout, TrainError> {
        let (spec, house, bank) = self.tasks[task];
        let mut compiler = self.template.clone().with_temperature(temperature);
        compiler.params = params.clone();
        let agent = Agent {
            vocab: self.vocab,
            actor: Actor::Executor { params: &self.model.executor, softmem: Some(&self.model.softmem) },
            backend: Some(&compiler as &dyn CompilerBackend<F>),
            privileged: false,
        };
        let run = run_episode(spec, house, Some(bank), Mode::Scmc, &agent, &self.episode, seed)?;
        Ok(Rollout {
            reward: f64::from(u8::from(run.trace.success)),
            decisions: run.decisions.into_iter().flatten().collect(),
        })
    }
}

pub fn cmd_grpo(cfg: &PipelineConfig) -> Result<Vec<grpo::GrpoLogRow>, PipelineError> {
    cfg.validate()?;
    let stem = cfg.paths.checkpoint.clone().unwrap_or_else(|| cfg.out("checkpoints/sft"));
    let mut model = load_model(cfg, &stem)?;
    let catalog = load_or_make_catalog(cfg)?;
    let banks = load_or_make_banks(cfg, &catalog, &cfg.world.train_houses)?;
    let vocab = cfg.vocab();
    let template = learned_template(cfg);
    let mut tasks = Vec::new();
    for (h, bank) in cfg.world.train_houses.iter().zip(&banks) {
        let house = catalog.house(h).ok_or_else(|| TrainError::UnknownHouse(h.clone()))?;
        tasks.extend(catalog.tasks_in(h).map(|t| (t, house, bank)));
    }
    let frozen = model.clone();
    let env = MiniHouseRollouts { tasks, model: &frozen, template: &template, vocab: &vocab, episode: cfg.eval.episode.clone() };
    let mut grpo_cfg = cfg.grpo.clone();
    grpo_cfg.seed ^= cfg.seed;
    let rows = cfg.with_workers(|| run_grpo(&mut model.compiler, &env, &grpo_cfg, |_, _| {}))??;
    write_text(&cfg.out("grpo_reward.csv"), &grpo::log_csv(&rows))?;
    save_model(&model, &cfg.out("checkpoints/grpo"), serde_json::json!({"stage": "grpo", "updates": rows.len()}))?;
    Ok(rows)
}

/// Newest checkpoint in the output dir: grpo, then sft.
pub fn default_checkpoint(cfg: &PipelineConfig) -> PathBuf {
    if let Some(p) = &cfg.paths.checkpoint {
        return p.clone();
    }
    let grpo = cfg.out("checkpoints/grpo");
    if crate::params::with_ext(&grpo, "json").exists() {
        grpo
    } else {
        cfg.out("checkpoints/sft")
    }
}

/// Traces and timings of one evaluation, in episode order per mode.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub traces: Vec<EpisodeTrace>,
    pub timings: Vec<EpisodeTiming>,
}

/// The `i`-th evaluation episode: task and seed, shared across modes.
pub fn episode_plan(cfg: &PipelineConfig, catalog: &Catalog) -> Vec<(usize, u64)> {
    let n = cfg.eval.episodes_per_mode;
    let tasks: Vec<usize> = (0..catalog.tasks.len())
        .filter(|&i| cfg.world.eval_houses.contains(&catalog.tasks[i].house))
        .collect();
    (0..n)
        .map(|i| {
            let seed = cfg.seed ^ crate::text::fnv1a(format!("eval#{i}").as_bytes());
            (tasks[i % tasks.len().max(1)], seed)
        })
        .collect()
}

/// Runs every configured mode with an already-loaded model.
pub fn evaluate(
    cfg: &PipelineConfig,
    catalog: &Catalog,
    banks: &[MemoryBank],
    model: &SftModel<F>,
    modes: &[Mode],
) -> Result<EvalRun, PipelineError> {
    let vocab = cfg.vocab();
    let mut learned = learned_template(cfg);
    learned.params = model.compiler.clone();
    let remote = match cfg.eval.backend {
        BackendKind::Remote => Some(RemoteCompiler::new(cfg.remote.clone())?),
        _ => None,
    };
    let backend: &dyn CompilerBackend<F> = match cfg.eval.backend {
        BackendKind::Oracle => &OracleCompiler,
        BackendKind::Learned => &learned,
        BackendKind::Remote => remote.as_ref().expect("remote backend built"),
    };
    let plan = episode_plan(cfg, catalog);
    if plan.is_empty() || catalog.tasks.iter().all(|t| !cfg.world.eval_houses.contains(&t.house)) {
        return Err(PipelineError::Config("no evaluation tasks".into()));
    }
    let mut traces = Vec::new();
    let mut timings = Vec::new();
    for &mode in modes {
        let runs: Vec<Result<(EpisodeTrace, EpisodeTiming), PipelineError>> = cfg.with_workers(|| {
            use rayon::prelude::*;
            plan.par_iter()
                .map(|&(ti, seed)| {
                    let spec = &catalog.tasks[ti];
                    let hi = cfg.world.eval_houses.iter().position(|h| *h == spec.house).expect("eval house");
                    let house = catalog.house(&spec.house).ok_or_else(|| TrainError::UnknownHouse(spec.house.clone()))?;
                    let agent = Agent {
                        vocab: &vocab,
                        actor: Actor::Executor { params: &model.executor, softmem: Some(&model.softmem) },
                        backend: Some(backend),
                        privileged: false,
                    };
                    let run = run_episode(spec, house, Some(&banks[hi]), mode, &agent, &cfg.eval.episode, seed)?;
                    Ok((run.trace, run.timing))
                })
                .collect()
        })?;
        for r in runs {
            let (t, tm) = r?;
            traces.push(t);
            timings.push(tm);
        }
    }
    Ok(EvalRun { traces, timings })
}

fn write_traces(cfg: &PipelineConfig, run: &EvalRun) -> Result<(), PipelineError> {
    let mut counters = std::collections::BTreeMap::new();
    for (t, tm) in run.traces.iter().zip(&run.timings) {
        let i = counters.entry(t.mode).or_insert(0usize);
        let dir = cfg.out(&format!("traces/{}", t.mode));
        ensure_dir(&dir)?;
        write_text(&dir.join(format!("{:04}.json", *i)), &(t.to_json() + "\n"))?;
        let timing = serde_json::to_string_pretty(tm).expect("timing serializes");
        write_text(&dir.join(format!("{:04}.timing.json", *i)), &(timing + "\n"))?;
        *i += 1;
    }
    Ok(())
}

fn eval_inputs(cfg: &PipelineConfig) -> Result<(Catalog, Vec<MemoryBank>, SftModel<F>), PipelineError> {
    cfg.validate()?;
    let stem = default_checkpoint(cfg);
    let model = load_model(cfg, &stem)?;
    let catalog = load_or_make_catalog(cfg)?;
    let banks = load_or_make_banks(cfg, &catalog, &cfg.world.eval_houses)?;
    Ok((catalog, banks, model))
}

/// Runs the configured modes and writes their traces.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalRun, PipelineError> {
    let (catalog, banks, model) = eval_inputs(cfg)?;
    let run = evaluate(cfg, &catalog, &banks, &model, &cfg.eval.modes)?;
    write_traces(cfg, &run)?;
    Ok(run)
}

/// Evaluates every configured mode and writes the report files.
pub fn cmd_compare(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let run = cmd_eval(cfg)?;
    let report = efficiency_report(&run.traces, &run.timings, &cfg.eval.modes)?;
    write_report(cfg, &report)?;
    if cfg.eval.export_hiddens {
        let p = cfg.out("hiddens.csv");
        export_hiddens(&run.traces, &p)?;
    }
    Ok(report)
}

pub fn write_report(cfg: &PipelineConfig, report: &RunReport) -> Result<(), PipelineError> {
    write_text(&cfg.out("report.json"), &(serde_json::to_string_pretty(report).expect("report serializes") + "\n"))?;
    write_text(&cfg.out("report.csv"), &report.to_csv())?;
    write_text(&cfg.out("attention.csv"), &report.attention_csv())?;
    let latency = serde_json::to_string_pretty(&report.latency_json()).expect("latency serializes");
    write_text(&cfg.out("report.timing.json"), &(latency + "\n"))?;
    Ok(())
}
