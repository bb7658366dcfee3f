//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scmc_core::compiler::learned::{decision_nll, CompilerParams, Decision, FoldStep, LearnedCompiler, SelectStep};
use scmc_core::env::Catalog;
use scmc_core::executor::{self, ExecutorConfig, ExecutorParams, Segment, SeqBuilder, Vocab};
use scmc_core::linalg::Mat;
use scmc_core::params::ParamSet;
use scmc_core::pipeline::{self, PipelineConfig};
use scmc_core::softmem::{self, SoftMemParams};
use scmc_core::training::{self, gradcheck, DataGenConfig, GradcheckReport, PreparedSample, SftConfig, SftModel, VecParam};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor so coordinates with vanishing gradient compare absolutely.
pub const FD_FLOOR: f64 = 1e-5;

pub fn executor_case(seed: u64) -> GradcheckReport {
    let vocab = Vocab::minihouse(8);
    let cfg = ExecutorConfig { d_base: 6, ..ExecutorConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: ExecutorParams<f64> = ExecutorParams::init(vocab.size(), executor::n_actions(), &cfg, &mut rng);
    let seq = SeqBuilder::new(&vocab)
        .text(Segment::Sys, "you are a household agent", 3)
        .text(Segment::Memory, "take apple from fridge", 3)
        .soft(2, 0)
        .text(Segment::Obs, "you see a mug and an apple", 0)
        .finish();
    let soft = Mat::randn(2, 6, 0.5, &mut rng);
    let target = (seed as usize * 7) % executor::n_actions();
    let loss = |q: &ExecutorParams<f64>| {
        let out = executor::forward(&seq, Some(&soft), q).expect("forward");
        executor::action_loss(&out, target, 0.1).0
    };
    let out = executor::forward(&seq, Some(&soft), &p).expect("forward");
    let (_, dl) = executor::action_loss(&out, target, 0.1);
    let mut g = p.zeros_like();
    executor::backward(&seq, &out, &dl, &p, &mut g);
    gradcheck(&p, loss, &g, FD_STEP, FD_FLOOR, 1)
}

/// Gradient of the soft objective with respect to the soft mean and the decoder
/// log-probabilities (the text mean is a constant).
pub fn soft_loss_case(seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = (8, 5);
    let text: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..d + n).map(|i| if i < d { rng.random_range(-1.0..1.0) } else { -rng.random_range(0.1..3.0) }).collect();
    let lambda = 0.7;
    let loss = |p: &VecParam<f64>| softmem::soft_loss(&p.0[..d], &text, &p.0[d..], lambda).loss;
    let sl = softmem::soft_loss(&x[..d], &text, &x[d..], lambda);
    let analytic = VecParam(sl.d_soft_mean.iter().chain(&sl.d_logprobs).copied().collect());
    gradcheck(&VecParam(x), loss, &analytic, FD_STEP, FD_FLOOR, 1)
}

/// Entropy of the projected Gaussian, differentiated into the projection weights.
pub fn latent_entropy_case(seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: SoftMemParams<f64> = SoftMemParams::init(4, 6, 10, &mut rng);
    let h = Mat::randn(3, 4, 1.0, &mut rng);
    let noise = Mat::randn(3, 6, 1.0, &mut rng);
    let loss = |q: &SoftMemParams<f64>| {
        let s = softmem::project_with_noise(&h, q, noise.clone()).expect("project");
        softmem::latent_entropy(s.log_sigma.as_slice())
    };
    let s = softmem::project_with_noise(&h, &p, noise.clone()).expect("project");
    let ones = Mat::from_fn(3, 6, |_, _| 1.0);
    let mut g = p.zeros_like();
    softmem::project_backward(&h, &s, &Mat::zeros(3, 6), Some(&ones), &mut g);
    gradcheck(&p, loss, &g, FD_STEP, FD_FLOOR, 1)
}

/// A handful of supervision samples from a one-house world at toy widths.
pub fn tiny_batch(seed: u64) -> (Vec<PreparedSample<f64>>, Vocab, ExecutorConfig, usize) {
    let vocab = Vocab::minihouse(4);
    let exec = ExecutorConfig { d_base: 5, hash_buckets: 4, ..ExecutorConfig::default() };
    let d_mc = 3;
    let catalog = Catalog::generate(&["g0"], 3, 2, seed);
    let bank = training::build_bank(&catalog, "g0", seed).expect("bank");
    let learned: LearnedCompiler<f64> = LearnedCompiler::new(vocab.clone(), d_mc, 2, seed);
    let cfg = DataGenConfig { episodes_per_task: 1, teacher_noise: 0.0, seed, ..DataGenConfig::default() };
    let samples = training::generate_sft_data(&catalog, &["g0".to_string()], &[bank], &learned, &cfg).expect("data");
    let mut picked: Vec<_> = samples.iter().filter(|s| s.soft.is_some()).take(2).collect();
    picked.extend(samples.iter().filter(|s| s.soft.is_none()).take(2));
    let prepared = picked.into_iter().map(|s| PreparedSample::prepare(s, &vocab, &learned.encoder)).collect();
    (prepared, vocab, exec, d_mc)
}

pub fn sft_loss_case(seed: u64) -> GradcheckReport {
    let (batch, vocab, exec, d_mc) = tiny_batch(seed);
    let model: SftModel<f64> = SftModel::init(&vocab, &exec, d_mc, seed);
    let cfg = SftConfig { orth_weight: 0.3, entropy_weight: 0.1, ..SftConfig::default() };
    let refs: Vec<&PreparedSample<f64>> = batch.iter().collect();
    let frozen = model.executor.embed.clone();
    let loss = |m: &SftModel<f64>| training::sft_loss_detached(m, &frozen, &refs, &cfg, seed).expect("loss").0.total;
    let (_, g) = training::sft_loss(&model, &refs, &cfg, seed).expect("loss");
    gradcheck(&model, loss, &g, FD_STEP, FD_FLOOR, 1)
}

fn random_decision(rng: &mut ChaCha8Rng) -> Decision {
    let folds = (0..rng.random_range(0..3))
        .map(|_| FoldStep {
            verb: rng.random_range(0..7),
            features: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            folded: rng.random_bool(0.5),
        })
        .collect();
    let n = rng.random_range(1..5);
    let select = Some(SelectStep {
        entries: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
        noact: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        chosen: rng.random_range(0..=n),
    });
    Decision { folds, select }
}

/// Clipped surrogate over whole trajectories, differentiated through the
/// compiler's decision log-probabilities.
pub fn grpo_loss_case(seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: CompilerParams<f64> = CompilerParams::init(0.5, &mut rng);
    let (tau, clip_low, clip_high) = (1.2, 0.2, 0.28);
    let trajs: Vec<Vec<Decision>> =
        (0..6).map(|_| (0..rng.random_range(1..4)).map(|_| random_decision(&mut rng)).collect()).collect();
    let logp = |p: &CompilerParams<f64>| -> Vec<f64> {
        trajs
            .iter()
            .map(|t| t.iter().map(|d| scmc_core::compiler::learned::decision_logprob(p, d, tau)).sum())
            .collect()
    };
    let now = logp(&params);
    // ratios land inside and outside the clip band, away from its edges
    let shifts = [0.05, -0.1, 0.5, -0.6, 0.12, -0.02];
    let old: Vec<f64> = now.iter().zip(shifts).map(|(l, s)| l - s).collect();
    let adv = [1.0, -1.0, 1.0, -1.0, -0.5, 0.5];
    let loss = |p: &CompilerParams<f64>| training::grpo_loss(&logp(p), &old, &adv, clip_low, clip_high).0;
    let (_, dlogp) = training::grpo_loss(&now, &old, &adv, clip_low, clip_high);
    let mut g = params.zeros_like();
    for (t, &dl) in trajs.iter().zip(&dlogp) {
        for d in t {
            decision_nll(&params, d, 0.0, tau, &mut g, -dl);
        }
    }
    gradcheck(&params, loss, &g, FD_STEP, FD_FLOOR, 1)
}

/// Plain `grpo_loss` with respect to the new log-probabilities.
pub fn grpo_surrogate_case(seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let new: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..-0.5)).collect();
    let old: Vec<f64> = new.iter().map(|l| l + rng.random_range(-0.15..0.15)).collect();
    let adv: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
    let loss = |p: &VecParam<f64>| training::grpo_loss(&p.0, &old, &adv, 0.2, 0.28).0;
    let (_, d) = training::grpo_loss(&new, &old, &adv, 0.2, 0.28);
    gradcheck(&VecParam(new), loss, &VecParam(d), FD_STEP, FD_FLOOR, 1)
}

/// Config for the desk-scale comparison run used by several acceptance checks.
pub fn desk_config(out_dir: PathBuf) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.paths.out_dir = out_dir;
    cfg.workers = std::thread::available_parallelism().map_or(1, |n| n.get().min(8));
    cfg.eval.episodes_per_mode = 200;
    cfg
}

pub struct TrainedRun {
    pub cfg: PipelineConfig,
    pub sft_secs: f64,
}

/// Catalog, banks, teacher data and one SFT checkpoint, built once per test binary.
pub fn trained_run() -> &'static TrainedRun {
    static RUN: OnceLock<TrainedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-run-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = desk_config(dir);
        let t = std::time::Instant::now();
        pipeline::cmd_gen_data(&cfg).expect("gen-data");
        pipeline::cmd_sft(&cfg).expect("sft");
        TrainedRun { cfg, sft_secs: t.elapsed().as_secs_f64() }
    })
}

/// Loopback HTTP server answering every request with `handler(index, headers, body)`,
/// which returns a status code and a JSON body.
pub fn http_server<F>(handler: F) -> String
where
    F: Fn(usize, &str, &str) -> (u16, String) + Send + 'static,
{
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().expect("addr"));
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().expect("clone"));
            let mut headers = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                headers.push_str(&line);
            }
            let mut body = vec![0u8; len];
            let _ = reader.read_exact(&mut body);
            let (status, reply) = handler(i, &headers, &String::from_utf8_lossy(&body));
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    url
}

pub fn chat_envelope(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

pub const MALFORMED_REPLIES: [&str; 5] = [
    "this is not json",
    r#"{"type":"EXPERIENCE"}"#,
    r#"{"type":"BRIEF","brief_ops":[{"op":"DELETE","section":"belief","key":"ghost"}]}"#,
    r#"{"type":"EXPERIENCE","guidance":"goto desk","confidence":0.9}"#,
    "",
];

pub const GOOD_REPLY: &str = r#"{"type":"EXPERIENCE","guidance":"goto countertop","reason":"mock"}"#;

/// Chat endpoint where request `i` gets a malformed reply when `malformed(i)`
/// holds. Returns the URL and a log of which requests were malformed.
pub fn mock_chat_server(malformed: fn(usize) -> bool) -> (String, std::sync::Arc<std::sync::Mutex<Vec<bool>>>) {
    let log = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let served = log.clone();
    let url = http_server(move |i, _, _| {
        let bad = malformed(i);
        served.lock().expect("log").push(bad);
        let body = match (bad, MALFORMED_REPLIES[i % MALFORMED_REPLIES.len()]) {
            (false, _) => chat_envelope(GOOD_REPLY),
            (true, "") => r#"{"id":"x","choices":[]}"#.to_string(),
            (true, content) => chat_envelope(content),
        };
        (200, body)
    });
    (url, log)
}
