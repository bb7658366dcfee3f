//! Group-relative policy optimization of the compiler's decision heads.
//!
//! The policy is the learned compiler; a trajectory's log-probability is the
//! sum of its decision log-probabilities at the rollout temperature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::compiler::learned::{decision_logprob, decision_nll, select_probs, CompilerParams, SelectStep};
use crate::compiler::Decision;
use crate::params::{AdamW, AdamWConfig, LrSchedule, ParamSet};
use crate::scalar::Scalar;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub tasks_per_update: usize,
    pub clip_low: f64,
    pub clip_high: f64,
    /// Weight of the KL penalty toward the policy at the start of training.
    pub beta: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub updates: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            tasks_per_update: 4,
            clip_low: 0.2,
            clip_high: 0.28,
            beta: 0.0,
            temperature: 1.2,
            top_k: 50,
            updates: 500,
            lr: 0.05,
            min_lr: 0.005,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-5,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

/// `(r - mean) / std` within a group, population std; all zeros when the
/// group has no spread.
pub fn grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return vec![];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Clipped surrogate, negated and averaged. Returns the loss and its gradient
/// with respect to each `logp_new`.
pub fn grpo_loss<T: Scalar>(
    logp_new: &[T],
    logp_old: &[T],
    advantages: &[f64],
    clip_low: f64,
    clip_high: f64,
) -> (T, Vec<T>) {
    let n = T::from_usize(logp_new.len().max(1)).expect("count");
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logp_new.len()];
    for i in 0..logp_new.len() {
        let a = T::lit(advantages[i]);
        let ratio = (logp_new[i] - logp_old[i]).exp();
        let clipped = ratio.max(T::lit(1.0 - clip_low)).min(T::lit(1.0 + clip_high));
        let (u, c) = (ratio * a, clipped * a);
        if u <= c {
            total += u;
            grad[i] = -ratio * a / n;
        } else {
            total += c;
        }
    }
    (-total / n, grad)
}

/// One sampled trajectory of the compiler policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub reward: f64,
    pub decisions: Vec<Decision>,
}

pub trait RolloutEnv<T: Scalar>: Sync {
    fn n_tasks(&self) -> usize;
    fn rollout(&self, params: &CompilerParams<T>, task: usize, temperature: f64, seed: u64) -> Result<Rollout, TrainError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoLogRow {
    pub update_index: usize,
    pub mean_reward: f64,
    pub failed_rollouts: usize,
    pub zero_adv_groups: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub skipped: bool,
}

pub fn log_csv(rows: &[GrpoLogRow]) -> String {
    let mut s = String::from("update_index,mean_reward,loss,zero_adv_groups,failed_rollouts,grad_norm,lr,skipped\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{},{},{:.6},{:.3e},{}\n",
            r.update_index, r.mean_reward, r.loss, r.zero_adv_groups, r.failed_rollouts, r.grad_norm, r.lr, r.skipped
        ));
    }
    s
}

fn trajectory_logp<T: Scalar>(p: &CompilerParams<T>, decisions: &[Decision], temperature: f64) -> T {
    decisions.iter().map(|d| decision_logprob(p, d, temperature)).sum()
}

/// Runs `cfg.updates` updates, calling `on_update` after each.
pub fn run_grpo<T: Scalar, E: RolloutEnv<T>>(
    params: &mut CompilerParams<T>,
    env: &E,
    cfg: &GrpoConfig,
    mut on_update: impl FnMut(&GrpoLogRow, &CompilerParams<T>),
) -> Result<Vec<GrpoLogRow>, TrainError> {
    let adam = AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
        max_grad_norm: cfg.max_grad_norm,
    };
    let schedule = LrSchedule { base_lr: cfg.lr, min_lr: cfg.min_lr, warmup_steps: cfg.updates / 20, total_steps: cfg.updates };
    let mut opt = AdamW::new(params, adam, schedule);
    let reference = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.updates);
    let g = cfg.group_size.max(1);
    for update in 0..cfg.updates {
        let tasks: Vec<usize> = (0..cfg.tasks_per_update).map(|_| rng.random_range(0..env.n_tasks().max(1))).collect();
        let seeds: Vec<u64> = (0..tasks.len() * g).map(|_| rng.random()).collect();
        let snapshot = params.clone();
        let results: Vec<Result<Rollout, TrainError>> = (0..tasks.len() * g)
            .into_par_iter()
            .map(|i| env.rollout(&snapshot, tasks[i / g], cfg.temperature, seeds[i]))
            .collect();
        let mut rollouts = Vec::with_capacity(results.len());
        let mut failed = 0usize;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(r) => rollouts.push(r),
                Err(e) => {
                    warn!(update, task = tasks[i / g], error = %e, "rollout failed, update aborted");
                    failed += 1;
                }
            }
        }
        if failed > 0 {
            let row = GrpoLogRow {
                update_index: update,
                mean_reward: f64::NAN,
                failed_rollouts: failed,
                zero_adv_groups: 0,
                loss: f64::NAN,
                grad_norm: 0.0,
                lr: opt.schedule.at(opt.steps_taken()),
                skipped: true,
            };
            on_update(&row, params);
            rows.push(row);
            continue;
        }

        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        let mut zero_groups = 0;
        let mut total_reward = 0.0;
        let scale = T::lit(1.0 / tasks.len() as f64);
        for (gi, group) in rollouts.chunks(g).enumerate() {
            let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
            total_reward += rewards.iter().sum::<f64>();
            let adv = grpo_advantages(&rewards);
            let zero = adv.iter().all(|a| *a == 0.0);
            if zero {
                zero_groups += 1;
            }
            if zero && cfg.beta == 0.0 {
                continue;
            }
            let new: Vec<T> = group.iter().map(|r| trajectory_logp(params, &r.decisions, cfg.temperature)).collect();
            let mut dlogp = vec![T::zero(); group.len()];
            if !zero {
                let old: Vec<T> =
                    group.iter().map(|r| trajectory_logp(&snapshot, &r.decisions, cfg.temperature)).collect();
                let (l, d) = grpo_loss(&new, &old, &adv, cfg.clip_low, cfg.clip_high);
                loss += l.as_f64() / tasks.len() as f64;
                dlogp = d;
            }
            if cfg.beta > 0.0 {
                // k3 estimator of KL(policy || reference): e^(ref - new) - (ref - new) - 1
                let beta = T::lit(cfg.beta);
                let n = T::from_usize(group.len()).expect("group");
                for ((r, &lp), dl) in group.iter().zip(&new).zip(dlogp.iter_mut()) {
                    let diff = trajectory_logp(&reference, &r.decisions, cfg.temperature) - lp;
                    let ratio = diff.exp();
                    loss += (beta * (ratio - diff - T::one()) / n).as_f64() / tasks.len() as f64;
                    *dl += beta * (T::one() - ratio) / n;
                }
            }
            for (r, &dl) in group.iter().zip(&dlogp) {
                // decision_nll is -logp, so weight -dL/dlogp yields dL/dtheta
                for d in &r.decisions {
                    decision_nll(params, d, 0.0, cfg.temperature, &mut grads, -dl * scale);
                }
            }
            debug!(update, group = gi, ?rewards, "group");
        }
        let skipped = zero_groups == tasks.len() && cfg.beta == 0.0;
        let lr = opt.schedule.at(opt.steps_taken());
        let grad_norm = if skipped { 0.0 } else { opt.step(params, &grads).as_f64() };
        if !params.all_finite() {
            return Err(TrainError::NonFinite("compiler parameters"));
        }
        let row = GrpoLogRow {
            update_index: update,
            mean_reward: total_reward / rollouts.len().max(1) as f64,
            failed_rollouts: 0,
            zero_adv_groups: zero_groups,
            loss,
            grad_norm,
            lr,
            skipped,
        };
        if update % 50 == 0 {
            info!(update, reward = row.mean_reward, "grpo");
        }
        on_update(&row, params);
        rows.push(row);
    }
    Ok(rows)
}

/// Toy environment: each state offers two entries, one applicable; reward 1
/// for selecting the applicable one.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    pub states: Vec<(SelectStep, usize)>,
}

impl BanditEnv {
    pub fn two_state() -> Self {
        let yes = [1.0, 0.5, 0.3, 1.0, 1.0, 1.0];
        let no = [0.0, 0.5, 0.3, 1.0, 1.0, 1.0];
        let noact = [1.0, 1.0];
        Self {
            states: vec![
                (SelectStep { entries: vec![yes, no], noact, chosen: 0 }, 0),
                (SelectStep { entries: vec![no, yes], noact, chosen: 0 }, 1),
            ],
        }
    }

    /// Probability of the rewarded choice in each state.
    pub fn correct_probs<T: Scalar>(&self, params: &CompilerParams<T>, temperature: f64) -> Vec<f64> {
        self.states.iter().map(|(s, c)| select_probs(params, s, temperature)[*c]).collect()
    }
}

impl<T: Scalar> RolloutEnv<T> for BanditEnv {
    fn n_tasks(&self) -> usize {
        self.states.len()
    }

    fn rollout(&self, params: &CompilerParams<T>, task: usize, temperature: f64, seed: u64) -> Result<Rollout, TrainError> {
        let (step, correct) = &self.states[task];
        let probs = select_probs(params, step, temperature);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let mut s = step.clone();
        s.chosen = chosen;
        Ok(Rollout {
            reward: f64::from(u8::from(chosen == *correct)),
            decisions: vec![Decision { folds: vec![], select: Some(s) }],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_hand_example() {
        let a = grpo_advantages(&[1.0, 0.0, 0.0, 0.0]);
        assert!((a[0] - 3f64.sqrt()).abs() < 1e-12);
        assert!((a[1] + 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(grpo_advantages(&[0.5; 4]), vec![0.0; 4]);
    }

    #[test]
    fn clip_is_asymmetric() {
        // ratio 1.5 with positive advantage clips at 1.28
        let (l, g) = grpo_loss(&[1.5f64.ln()], &[0.0], &[1.0], 0.2, 0.28);
        assert!((l + 1.28).abs() < 1e-12 && g[0] == 0.0);
        // ratio 0.5 with negative advantage clips at 0.8
        let (l, g) = grpo_loss(&[0.5f64.ln()], &[0.0], &[-1.0], 0.2, 0.28);
        assert!((l - 0.8).abs() < 1e-12 && g[0] == 0.0);
        // inside the band the gradient flows
        let (_, g) = grpo_loss(&[1.1f64.ln()], &[0.0], &[1.0], 0.2, 0.28);
        assert!((g[0] + 1.1).abs() < 1e-12);
    }
}
