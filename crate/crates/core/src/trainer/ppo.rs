use rand::seq::SliceRandom;

use super::{PpoConfig, Trajectory, TrainerError};
use crate::adam::AdamState;
use crate::models::{decision_input, Critic, ModelConfig, Summarizer};
use crate::params::{Gradients, ParamStore};
use crate::reward::{summary_prefix, Condition, RewardLearner, RmVariant};
use crate::rng::{stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::world::Token;

const MINIBATCH: u64 = 0x4d42;

/// Policy, frozen reference, critic and reward model of one joint run.
#[derive(Debug, Clone)]
pub struct Models {
    pub config: ModelConfig,
    pub policy: Summarizer,
    pub policy_store: ParamStore,
    pub reference: ParamStore,
    pub critic: Critic,
    pub critic_store: ParamStore,
    pub rm: RewardLearner,
}

impl Models {
    /// Fresh models whose trunks all start from `base` when given.
    pub fn new(config: &ModelConfig, base: Option<&ParamStore>, seed: u64) -> Self {
        let mut policy_store = ParamStore::new();
        let policy = Summarizer::new(&mut policy_store, config, &mut stream(seed, &[0x5049]));
        let mut critic_store = ParamStore::new();
        let critic = Critic::new(&mut critic_store, config, &mut stream(seed, &[0x4352]));
        let mut rm = RewardLearner::new(RmVariant::Summary, config, seed, false);
        if let Some(base) = base {
            policy_store.load_matching(base);
            critic_store.load_matching(base);
            rm.init_from(base);
        }
        Self {
            config: *config,
            reference: policy_store.clone(),
            policy,
            policy_store,
            critic,
            critic_store,
            rm,
        }
    }

    fn drop_frozen(&self, grads: &mut Gradients, embedding: crate::params::ParamId) {
        if self.config.frozen_embeddings {
            grads.retain(|id| id != embedding);
        }
    }
}

/// A record as shown to the policy in one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutItem {
    pub context: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

/// Samples one summary per item and scores it. Items whose task reward is
/// not finite are dropped; their count is returned alongside.
pub fn rollout(
    models: &Models,
    items: &[RolloutItem],
    config: &PpoConfig,
    iteration: usize,
    mut rng_for: impl FnMut(usize) -> Rng,
) -> Result<(Vec<Trajectory>, usize), TrainerError> {
    let mut out = Vec::with_capacity(items.len());
    let mut dropped = 0;
    for (i, item) in items.iter().enumerate() {
        let sample = models
            .policy
            .sample(&models.policy_store, &item.context, config.temperature, &mut rng_for(i))?;
        let z = sample.tokens;
        let (old_logprobs, kl) = models
            .policy
            .logprobs_and_kl(&models.policy_store, &models.reference, &item.context, &z)?;
        let values = models.critic.values(&models.critic_store, &item.context, &z)?;
        let reward = task_reward(&models.rm, &z, &item.chosen, &item.rejected)?;
        if !reward.is_finite() {
            log::warn!("dropping trajectory {i} of iteration {iteration}: reward {reward}");
            dropped += 1;
            continue;
        }
        out.push(Trajectory {
            iteration,
            context: item.context.clone(),
            chosen: item.chosen.clone(),
            rejected: item.rejected.clone(),
            z,
            old_logprobs,
            kl,
            values,
            reward,
            advantages: Vec::new(),
            returns: Vec::new(),
        });
    }
    Ok((out, dropped))
}

/// Negated pair loss of the reward model conditioned on summary `z`.
pub(crate) fn task_reward(rm: &RewardLearner, z: &[Token], chosen: &[Token], rejected: &[Token]) -> Result<f32, TrainerError> {
    let cond = Condition::Prefix(summary_prefix(crate::models::strip_eos(z)));
    let mut tape = Tape::new();
    let (loss, _) = rm.pair_loss(&mut tape, &cond, chosen, rejected, None)?;
    Ok(-tape.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoDiagnostics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Actor loss of the very first minibatch, before any update.
    pub first_actor_loss: f64,
    pub first_mean_ratio: f64,
}

pub(crate) struct ActorTerms {
    pub(crate) loss: Var,
    ratio_sum: f64,
    clipped: usize,
    entropy_sum: f64,
}

pub(crate) fn actor_terms(models: &Models, tape: &mut Tape, t: &Trajectory, clip: f32) -> Result<ActorTerms, TrainerError> {
    let input = decision_input(&t.context, &t.z);
    let lp = models.policy.log_policy(tape, &models.policy_store, &input, t.len())?;
    let rows = tape.value(lp).clone();
    let entropy_sum = (0..t.len()).map(|r| crate::models::entropy_row(rows.row(r))).sum();
    let new = tape.pick(lp, &t.z)?;
    let old = tape.constant(Tensor::vector(t.old_logprobs.clone()));
    let diff = tape.sub(new, old)?;
    let ratio = tape.exp(diff)?;
    let adv = tape.constant(Tensor::vector(t.advantages.clone()));
    let plain = tape.mul(ratio, adv)?;
    let bounded = tape.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let bounded = tape.mul(bounded, adv)?;
    let surrogate = tape.minimum(plain, bounded)?;
    let loss = tape.sum(surrogate)?;
    let r = tape.value(ratio).data();
    Ok(ActorTerms {
        loss,
        ratio_sum: r.iter().map(|&x| x as f64).sum(),
        clipped: r.iter().filter(|&&x| (x - 1.0).abs() > clip).count(),
        entropy_sum,
    })
}

pub(crate) fn critic_terms(models: &Models, tape: &mut Tape, t: &Trajectory) -> Result<Var, TrainerError> {
    let v = models.critic.values_var(tape, &models.critic_store, &t.context, &t.z)?;
    let g = tape.constant(Tensor::new(vec![t.len(), 1], t.returns.clone())?);
    let d = tape.sub(v, g)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq)?)
}

/// Clipped-surrogate updates of the policy and squared-error updates of
/// the critic over `ppo_epochs` shuffled passes of minibatches.
pub fn ppo_update(
    models: &mut Models,
    actor_adam: &mut AdamState,
    critic_adam: &mut AdamState,
    trajs: &[Trajectory],
    config: &PpoConfig,
    iteration: usize,
    seed: u64,
) -> Result<PpoDiagnostics, TrainerError> {
    let mut diag = PpoDiagnostics::default();
    let trajs: Vec<&Trajectory> = trajs.iter().filter(|t| !t.is_empty()).collect();
    if trajs.is_empty() {
        return Ok(diag);
    }
    for t in &trajs {
        if t.advantages.len() != t.len() || t.returns.len() != t.len() {
            return Err(TrainerError::Trajectory("advantages not computed".into()));
        }
    }
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    let (mut tokens_total, mut ratio_total, mut clipped_total, mut entropy_total) = (0usize, 0.0, 0usize, 0.0);
    let (mut actor_total, mut critic_total, mut batches) = (0.0, 0.0, 0usize);
    let policy_emb = models.policy.trunk.token_embedding();
    let critic_emb = models.critic.trunk.token_embedding();
    for epoch in 0..config.ppo_epochs {
        order.shuffle(&mut stream(seed, &[MINIBATCH, iteration as u64, epoch as u64]));
        let (mut epoch_tokens, mut epoch_clipped) = (0usize, 0usize);
        for chunk in order.chunks(config.minibatch_size) {
            let n_tokens: usize = chunk.iter().map(|&i| trajs[i].len()).sum();
            let scale = 1.0 / n_tokens as f32;
            let mut actor_grads = Gradients::new();
            let mut critic_grads = Gradients::new();
            let (mut a_loss, mut c_loss, mut r_sum) = (0.0, 0.0, 0.0);
            for &i in chunk {
                let t = trajs[i];
                let mut tape = Tape::new();
                let terms = actor_terms(models, &mut tape, t, config.clip)?;
                let loss = tape.scale(terms.loss, -scale)?;
                a_loss += tape.value(loss).item() as f64;
                actor_grads.accumulate(&tape.backward(loss)?);
                r_sum += terms.ratio_sum;
                epoch_clipped += terms.clipped;
                entropy_total += terms.entropy_sum;
                let mut tape = Tape::new();
                let sq = critic_terms(models, &mut tape, t)?;
                let loss = tape.scale(sq, scale)?;
                c_loss += tape.value(loss).item() as f64;
                critic_grads.accumulate(&tape.backward(loss)?);
            }
            if batches == 0 {
                diag.first_actor_loss = a_loss;
                diag.first_mean_ratio = r_sum / n_tokens as f64;
            }
            models.drop_frozen(&mut actor_grads, policy_emb);
            models.drop_frozen(&mut critic_grads, critic_emb);
            actor_adam.step(&mut models.policy_store, &actor_grads)?;
            critic_adam.step(&mut models.critic_store, &critic_grads)?;
            epoch_tokens += n_tokens;
            ratio_total += r_sum;
            actor_total += a_loss;
            critic_total += c_loss;
            batches += 1;
        }
        if epoch_tokens > 0 && epoch_clipped == epoch_tokens {
            return Err(TrainerError::PolicyCollapsed { iteration, epoch });
        }
        tokens_total += epoch_tokens;
        clipped_total += epoch_clipped;
    }
    diag.mean_ratio = ratio_total / tokens_total as f64;
    diag.clip_fraction = clipped_total as f64 / tokens_total as f64;
    diag.entropy = entropy_total / tokens_total as f64;
    diag.actor_loss = actor_total / batches as f64;
    diag.critic_loss = critic_total / batches as f64;
    Ok(diag)
}
