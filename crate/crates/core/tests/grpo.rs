//! GRPO update loop behavior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scmc_core::compiler::learned::CompilerParams;
use scmc_core::training::{grpo, BanditEnv, GrpoConfig, Rollout, RolloutEnv, TrainError};

/// Bandit whose rollouts fail on chosen updates.
struct Flaky {
    inner: BanditEnv,
    fail_seed_below: u64,
}

impl RolloutEnv<f64> for Flaky {
    fn n_tasks(&self) -> usize {
        RolloutEnv::<f64>::n_tasks(&self.inner)
    }

    fn rollout(&self, p: &CompilerParams<f64>, task: usize, temperature: f64, seed: u64) -> Result<Rollout, TrainError> {
        if seed < self.fail_seed_below {
            return Err(TrainError::NonFinite("simulated environment failure"));
        }
        self.inner.rollout(p, task, temperature, seed)
    }
}

fn params() -> CompilerParams<f64> {
    CompilerParams::init(0.02, &mut ChaCha8Rng::seed_from_u64(1))
}

#[test]
fn env_failure_aborts_only_that_update() {
    let env = Flaky { inner: BanditEnv::two_state(), fail_seed_below: u64::MAX / 8 };
    let cfg = GrpoConfig { updates: 40, seed: 5, ..GrpoConfig::default() };
    let mut p = params();
    let before = p.clone();
    let rows = grpo::run_grpo(&mut p, &env, &cfg, |_, _| {}).expect("run continues");
    assert_eq!(rows.len(), 40);
    let aborted: Vec<_> = rows.iter().filter(|r| r.failed_rollouts > 0).collect();
    assert!(!aborted.is_empty(), "expected some simulated failures");
    assert!(aborted.iter().all(|r| r.skipped && r.grad_norm == 0.0));
    assert!(rows.iter().any(|r| r.failed_rollouts == 0 && !r.skipped));
    assert_ne!(p, before);
}

#[test]
fn same_seed_same_reward_curve() {
    let env = BanditEnv::two_state();
    let cfg = GrpoConfig { updates: 30, seed: 9, ..GrpoConfig::default() };
    let run = || {
        let mut p = params();
        grpo::log_csv(&grpo::run_grpo(&mut p, &env, &cfg, |_, _| {}).expect("run"))
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.starts_with("update_index,mean_reward,loss,"));
    assert_eq!(a.lines().count(), 31);
}

#[test]
fn kl_penalty_keeps_policy_closer_to_start() {
    let env = BanditEnv::two_state();
    let start = params();
    let drift = |beta: f64| {
        let cfg = GrpoConfig { updates: 150, beta, seed: 2, ..GrpoConfig::default() };
        let mut p = start.clone();
        grpo::run_grpo(&mut p, &env, &cfg, |_, _| {}).expect("run");
        let probs = env.correct_probs(&p, cfg.temperature);
        probs.iter().sum::<f64>() / probs.len() as f64
    };
    let free = drift(0.0);
    let held = drift(2.0);
    assert!(held < free, "beta 2.0 reached {held}, beta 0 reached {free}");
}

#[test]
fn all_zero_advantage_updates_are_skipped() {
    // every state rewards the same choice with certainty once the policy is sharp
    let env = BanditEnv::two_state();
    let mut p = params();
    let cfg = GrpoConfig { updates: 400, seed: 3, ..GrpoConfig::default() };
    let rows = grpo::run_grpo(&mut p, &env, &cfg, |_, _| {}).expect("run");
    let late = &rows[300..];
    assert!(late.iter().any(|r| r.skipped));
    assert!(late.iter().filter(|r| r.skipped).all(|r| r.zero_adv_groups == cfg.tasks_per_update));
}
