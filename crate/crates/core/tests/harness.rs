//! Episode loop contracts across the three modes, reports and hidden export.

use rand_chacha::ChaCha8Rng;
use scmc_core::compiler::learned::LearnedCompiler;
use scmc_core::compiler::{Compiled, CompiledOutput, CompilerBackend, RuntimeState, Variant};
use scmc_core::env::{Catalog, GroundTruth};
use scmc_core::executor::{ExecutorConfig, Segment, Vocab};
use scmc_core::harness::{
    efficiency_report, export_hiddens, run_episode, Actor, Agent, EpisodeConfig, EpisodeTrace, HarnessError, Mode,
};
use scmc_core::memory::{CandidatePool, MemoryBank};
use scmc_core::training::{build_bank, SftModel};

struct World {
    catalog: Catalog,
    bank: MemoryBank,
    vocab: Vocab,
    model: SftModel<f64>,
    learned: LearnedCompiler<f64>,
}

fn world() -> World {
    let catalog = Catalog::generate(&["w0"], 6, 5, 21);
    let bank = build_bank(&catalog, "w0", 21).expect("bank");
    let vocab = Vocab::minihouse(16);
    let model = SftModel::init(&vocab, &ExecutorConfig::default(), 32, 21);
    let mut learned = LearnedCompiler::new(vocab.clone(), 32, 16, 7);
    learned.params = model.compiler.clone();
    World { catalog, bank, vocab, model, learned }
}

fn episodes(w: &World, mode: Mode, backend: &dyn CompilerBackend<f64>, cfg: &EpisodeConfig) -> Vec<EpisodeTrace> {
    let house = w.catalog.house("w0").expect("house");
    let agent = Agent {
        vocab: &w.vocab,
        actor: Actor::Executor { params: &w.model.executor, softmem: Some(&w.model.softmem) },
        backend: Some(backend),
        privileged: false,
    };
    w.catalog
        .tasks
        .iter()
        .enumerate()
        .map(|(i, spec)| run_episode(spec, house, Some(&w.bank), mode, &agent, cfg, 100 + i as u64).expect("episode").trace)
        .collect()
}

fn memory_text(step: &scmc_core::harness::StepRecord) -> Vec<&str> {
    step.exec_input.iter().filter(|s| s.segment == Segment::Memory).map(|s| s.text.as_str()).collect()
}

/// Guidance on even steps, NOACTION on odd ones.
struct Alternating;

impl CompilerBackend<f64> for Alternating {
    fn name(&self) -> &'static str {
        "alternating"
    }

    fn compile(&self, state: &RuntimeState, _: &CandidatePool, _: Option<&dyn GroundTruth>, _: &mut ChaCha8Rng) -> Compiled<f64> {
        if state.step % 2 == 0 {
            Compiled::plain(CompiledOutput::from_parts(Some("goto fridge".into()), None, None))
        } else {
            Compiled::plain(CompiledOutput::no_action(Some("nothing useful")))
        }
    }
}

#[test]
fn no_mem_has_no_memory_tokens() {
    let w = world();
    for t in episodes(&w, Mode::NoMem, &w.learned, &EpisodeConfig::default()) {
        for s in &t.steps {
            assert!(memory_text(s).is_empty());
            assert_eq!(s.soft_tokens, 0);
            assert_eq!(s.tokens.compiler_in, 0);
            assert!(s.compiled.is_none());
        }
    }
}

#[test]
fn ammi_memory_is_identical_every_step_and_never_shorter() {
    let w = world();
    let cfg = EpisodeConfig::default();
    let ammi = episodes(&w, Mode::Ammi, &w.learned, &cfg);
    let scmc = episodes(&w, Mode::Scmc, &w.learned, &cfg);
    for (a, s) in ammi.iter().zip(&scmc) {
        let first = memory_text(&a.steps[0]);
        assert!(!first.is_empty());
        for step in &a.steps {
            assert_eq!(memory_text(step), first);
        }
        for (sa, ss) in a.steps.iter().zip(&s.steps) {
            assert!(sa.tokens.exec_in >= ss.tokens.exec_in, "step {}: {} < {}", sa.t, sa.tokens.exec_in, ss.tokens.exec_in);
        }
    }
}

#[test]
fn noaction_leaves_memory_empty() {
    let w = world();
    let traces = episodes(&w, Mode::Scmc, &Alternating, &EpisodeConfig::default());
    let mut seen = [false; 2];
    for s in traces.iter().flat_map(|t| &t.steps) {
        let c = s.compiled.as_ref().expect("scmc compiles every step");
        if c.variant == Variant::NoAction {
            seen[1] = true;
            assert!(memory_text(s).is_empty());
            assert_eq!(s.soft_tokens, 0);
        } else {
            seen[0] = true;
            assert_eq!(memory_text(s), ["goto fridge"]);
        }
    }
    assert_eq!(seen, [true, true]);
}

#[test]
fn report_requires_every_mode() {
    let w = world();
    let traces = episodes(&w, Mode::NoMem, &w.learned, &EpisodeConfig::default());
    let timings = vec![Default::default(); traces.len()];
    let err = efficiency_report(&traces, &timings, &[Mode::NoMem, Mode::Scmc]).unwrap_err();
    assert!(matches!(err, HarnessError::MissingMode(Mode::Scmc)));
    let rep = efficiency_report(&traces, &timings, &[Mode::NoMem]).expect("report");
    let row = rep.row(Mode::NoMem).expect("row");
    assert_eq!(row.episodes, traces.len());
    let expect = traces.iter().filter(|t| t.success).count() as f64 / traces.len() as f64;
    assert!((row.success_rate - expect).abs() < 1e-12);
    assert!(rep.to_csv().lines().count() == 2);
}

#[test]
fn efficiency_report_hand_example() {
    let w = world();
    let mut traces = episodes(&w, Mode::NoMem, &w.learned, &EpisodeConfig::default());
    traces.truncate(2);
    traces[0].success = true;
    traces[1].success = false;
    for (i, t) in traces.iter_mut().enumerate() {
        t.steps.truncate(2);
        for s in &mut t.steps {
            s.tokens.exec_in = 10 * (i + 1);
            s.tokens.exec_out = 2;
        }
    }
    let timings = vec![Default::default(); 2];
    let rep = efficiency_report(&traces, &timings, &[Mode::NoMem]).expect("report");
    let row = rep.row(Mode::NoMem).expect("row");
    assert_eq!(row.success_rate, 0.5);
    assert_eq!(row.mean_steps, 2.0);
    assert_eq!(row.mean_exec_in, 15.0);
    assert_eq!(row.mean_exec_out, 2.0);
}

#[test]
fn hidden_export_has_sixteen_soft_rows_per_compiled_step() {
    let w = world();
    let cfg = EpisodeConfig { record_hiddens: true, ..EpisodeConfig::default() };
    let traces = episodes(&w, Mode::Scmc, &w.learned, &cfg);
    let with_hidden = traces.iter().flat_map(|t| &t.steps).filter(|s| s.hidden.is_some()).count();
    assert!(with_hidden > 0);
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("hiddens.csv");
    let rows = export_hiddens(&traces, &path).expect("export");
    let text = std::fs::read_to_string(&path).expect("read");
    let mut lines = text.lines();
    assert!(lines.next().expect("header").starts_with("episode,step,channel,d0"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), rows);
    let soft = body.iter().filter(|l| l.split(',').nth(2) == Some("soft")).count();
    assert!(body.iter().all(|l| matches!(l.split(',').nth(2), Some("soft" | "text"))));
    assert_eq!(soft, 16 * with_hidden);
}

#[test]
fn traces_serialize_round_trip() {
    let w = world();
    let t = &episodes(&w, Mode::Scmc, &w.learned, &EpisodeConfig::default())[0];
    let back: EpisodeTrace = serde_json::from_str(&t.to_json()).expect("parse");
    assert_eq!(&back, t);
}

#[test]
fn missing_bank_is_an_error() {
    let w = world();
    let house = w.catalog.house("w0").expect("house");
    let agent = Agent {
        vocab: &w.vocab,
        actor: Actor::Executor { params: &w.model.executor, softmem: None },
        backend: None,
        privileged: false,
    };
    let r = run_episode(&w.catalog.tasks[0], house, None, Mode::Ammi, &agent, &EpisodeConfig::default(), 0);
    assert!(matches!(r, Err(HarnessError::MissingBank(Mode::Ammi))));
}
