//! Joint training of the summary policy and the summary-conditioned reward
//! model with PPO.

mod joint;
mod ppo;

use serde::{Deserialize, Serialize};

use crate::adam::AdamError;
use crate::models::ModelError;
use crate::reward::RewardError;
use crate::tensor::TensorError;
use crate::world::Token;

pub use joint::{curves_csv, greedy_summaries, joint_train, rm_step, CurveRow, JointConfig, JointOutcome};
pub use ppo::{rollout, ppo_update, Models, PpoDiagnostics, RolloutItem};
pub(crate) use ppo::{actor_terms, critic_terms};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("summaries from iteration {found} offered to reward update of iteration {expected}")]
    StaleSummaries { expected: usize, found: usize },
    #[error("policy collapsed: every ratio clipped in PPO epoch {epoch} of iteration {iteration}")]
    PolicyCollapsed { iteration: usize, epoch: usize },
    #[error("trajectory fields disagree in length: {0}")]
    Trajectory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f32,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub gamma: f32,
    pub lambda: f32,
    /// Per-token penalty on KL to the reference policy.
    pub kl_coef: f32,
    pub actor_lr: f32,
    pub critic_lr: f32,
    pub rm_lr: f32,
    pub rollout_batch: usize,
    pub normalize_advantages: bool,
    /// Sampling temperature for rollouts.
    pub temperature: f32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            ppo_epochs: 4,
            minibatch_size: 8,
            gamma: 1.0,
            lambda: 0.95,
            kl_coef: 0.01,
            actor_lr: 1e-4,
            critic_lr: 3e-4,
            rm_lr: 2e-4,
            rollout_batch: 32,
            normalize_advantages: true,
            temperature: 1.0,
        }
    }
}

impl PpoConfig {
    /// Defaults with the smaller KL coefficient used for topic worlds.
    pub fn pets() -> Self {
        Self {
            kl_coef: 0.001,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: String| Err(TrainerError::Config(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if self.kl_coef.is_nan() || self.kl_coef < 0.0 {
            return bad(format!("kl_coef must be non-negative, got {}", self.kl_coef));
        }
        if self.minibatch_size == 0 || self.rollout_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("rm_lr", self.rm_lr)] {
            if lr.is_nan() || lr < 0.0 {
                return bad(format!("{name} must be non-negative, got {lr}"));
            }
        }
        Ok(())
    }
}

/// One sampled summary and everything PPO needs about it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Iteration that produced the summary.
    pub iteration: usize,
    pub context: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    /// Emitted tokens, including a final `EOS` when one was sampled.
    pub z: Vec<Token>,
    pub old_logprobs: Vec<f32>,
    /// KL to the reference policy at each step.
    pub kl: Vec<f32>,
    pub values: Vec<f32>,
    /// Terminal task reward, the negated pair loss.
    pub reward: f32,
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Per-token rewards: the KL penalty everywhere plus the task reward at the end.
    pub fn shaped_rewards(&self, kl_coef: f32) -> Vec<f32> {
        let mut r: Vec<f32> = self.kl.iter().map(|k| -kl_coef * k).collect();
        if let Some(last) = r.last_mut() {
            *last += self.reward;
        }
        r
    }

    fn check(&self) -> Result<(), TrainerError> {
        let n = self.z.len();
        if self.old_logprobs.len() != n || self.kl.len() != n || self.values.len() != n {
            return Err(TrainerError::Trajectory(format!(
                "z {n}, logprobs {}, kl {}, values {}",
                self.old_logprobs.len(),
                self.kl.len(),
                self.values.len()
            )));
        }
        Ok(())
    }
}

/// GAE over one episode. Values past the last token are zero.
/// Returns `(advantages, returns)`.
pub fn gae(rewards: &[f32], values: &[f32], gamma: f32, lambda: f32) -> (Vec<f32>, Vec<f32>) {
    let n = rewards.len();
    let mut adv = vec![0.0f32; n];
    let mut running = 0.0f32;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Fills advantages and returns of every trajectory, then normalizes the
/// advantages across the batch when asked.
pub fn compute_advantages(trajs: &mut [Trajectory], config: &PpoConfig) -> Result<(), TrainerError> {
    for t in trajs.iter_mut() {
        t.check()?;
        let rewards = t.shaped_rewards(config.kl_coef);
        let (adv, ret) = gae(&rewards, &t.values, config.gamma, config.lambda);
        t.advantages = adv;
        t.returns = ret;
    }
    if config.normalize_advantages {
        normalize_advantages(trajs);
    }
    Ok(())
}

/// Shifts and scales all advantages in the batch to mean 0 and standard
/// deviation 1. A constant batch is only centered.
pub fn normalize_advantages(trajs: &mut [Trajectory]) {
    let all: Vec<f64> = trajs.iter().flat_map(|t| t.advantages.iter().map(|&a| a as f64)).collect();
    if all.is_empty() {
        return;
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    for t in trajs {
        for a in &mut t.advantages {
            *a = ((*a as f64 - mean) * scale) as f32;
        }
    }
}
