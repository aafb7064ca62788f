use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{compute_advantages, ppo_update, rollout, Models, PpoConfig, RolloutItem, Trajectory, TrainerError};
use crate::adam::{AdamConfig, AdamState};
use crate::models::ModelConfig;
use crate::params::ParamStore;
use crate::reward::{
    evaluate, summary_prefix, train_rm, Condition, Relabeling, RewardLearner, RmVariant, SummaryBook, TrainConfig,
};
use crate::rng::stream;
use crate::world::{DatasetRecord, PreferencePair, Segment, World};

const ORDER: u64 = 0x4f52;
const RELABEL: u64 = 0x524c;
const ROLLOUT: u64 = 0x524f;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub ppo: PpoConfig,
    /// Passes over the training records.
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of rollouts shown under a random consistent relabeling of
    /// non-structural tokens.
    pub relabel_rate: f64,
    /// Reward-model Adam steps per iteration, all on the same fresh batch.
    pub rm_steps: usize,
    /// Leading iterations in which the reward model trains only its head
    /// and final norm.
    pub rm_probe_iterations: usize,
    pub rm_probe_lr: f32,
    pub probe_every: usize,
    pub probe_records: usize,
    /// Consecutive bad iterations that halt training.
    pub divergence_window: usize,
    /// Off gives the untrained-summarizer ablation: the policy stays at its
    /// reference and only the reward model learns.
    pub update_policy: bool,
    /// Start the reward model from an unconditioned pairwise run.
    pub warm_start_rm: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::pets(),
            epochs: 3,
            seed: 0,
            relabel_rate: 1.0,
            rm_steps: 4,
            rm_probe_iterations: 60,
            rm_probe_lr: 3e-3,
            probe_every: 50,
            probe_records: 64,
            divergence_window: 200,
            update_policy: true,
            warm_start_rm: false,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        self.ppo.validate()?;
        if !(0.0..=1.0).contains(&self.relabel_rate) {
            return Err(TrainerError::Config(format!("relabel_rate must lie in [0, 1], got {}", self.relabel_rate)));
        }
        if self.rm_steps == 0 || self.probe_every == 0 {
            return Err(TrainerError::Config("rm_steps and probe_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the training curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub rm_loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub probe_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub models: Models,
    pub curves: Vec<CurveRow>,
    /// Iteration at which the divergence guard stopped training.
    pub halted: Option<usize>,
    /// Trajectories dropped for a non-finite reward.
    pub dropped: usize,
}

/// `iteration,mean_R,rm_loss,mean_kl,clip_frac,probe_accuracy`, with an
/// empty probe cell when no probe ran.
pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("iteration,mean_R,rm_loss,mean_kl,clip_frac,probe_accuracy\n");
    for r in rows {
        let probe = r.probe_accuracy.map(|p| format!("{p:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{probe}",
            r.iteration, r.mean_reward, r.rm_loss, r.mean_kl, r.clip_fraction
        );
    }
    out
}

/// One greedy summary per user, from the first record of each.
pub fn greedy_summaries(models: &Models, records: &[DatasetRecord]) -> Result<SummaryBook, TrainerError> {
    let mut book = BTreeMap::new();
    for r in records {
        if book.contains_key(&r.user_id()) {
            continue;
        }
        let s = models
            .policy
            .sample(&models.policy_store, &r.context.tokens(), 0.0, &mut stream(0, &[]))?;
        book.insert(r.user_id(), s.content().to_vec());
    }
    Ok(book)
}

/// Adam steps on the mean summary-conditioned pair loss of `batch`, whose
/// summaries must all come from `iteration`. Returns the loss before the
/// first step.
pub fn rm_step(
    rm: &mut RewardLearner,
    adam: &mut AdamState,
    batch: &[Trajectory],
    iteration: usize,
    steps: usize,
) -> Result<f64, TrainerError> {
    if let Some(t) = batch.iter().find(|t| t.iteration != iteration) {
        return Err(TrainerError::StaleSummaries {
            expected: iteration,
            found: t.iteration,
        });
    }
    let conds: Vec<Condition> = batch
        .iter()
        .map(|t| Condition::Prefix(summary_prefix(crate::models::strip_eos(&t.z))))
        .collect();
    let pairs: Vec<PreferencePair> = batch.iter().map(|t| bare_pair(&t.chosen, &t.rejected)).collect();
    let items: Vec<_> = conds.iter().zip(&pairs).collect();
    let mut first = None;
    for _ in 0..steps.max(1) {
        let (grads, loss, _) = rm.batch_gradients(&items, |_| None)?;
        first.get_or_insert(loss);
        adam.step(&mut rm.store, &grads)?;
    }
    Ok(first.unwrap_or(0.0))
}

fn bare_pair(chosen: &[crate::world::Token], rejected: &[crate::world::Token]) -> PreferencePair {
    PreferencePair {
        chosen: Segment {
            tokens: chosen.to_vec(),
            annotation: Default::default(),
        },
        rejected: Segment {
            tokens: rejected.to_vec(),
            annotation: Default::default(),
        },
        flipped: false,
    }
}

fn probe_accuracy(models: &Models, world: &World, probe: &[DatasetRecord]) -> Result<f64, TrainerError> {
    let book = greedy_summaries(models, probe)?;
    Ok(evaluate(&models.rm, world, probe, Some(&book))?.accuracy)
}

/// Tracks the best mean reward and counts consecutive iterations that are
/// more than 50% worse than it.
#[derive(Debug, Clone, Default)]
struct DivergenceGuard {
    best: Option<f64>,
    bad: usize,
}

impl DivergenceGuard {
    fn observe(&mut self, mean_reward: f64) -> usize {
        let best = *self.best.get_or_insert(mean_reward);
        if mean_reward > best {
            self.best = Some(mean_reward);
        }
        let worse = mean_reward < best - 0.5 * best.abs();
        self.bad = if worse { self.bad + 1 } else { 0 };
        self.bad
    }
}

/// The co-adaptation loop: per batch, rollout, then PPO, then reward-model
/// update on the summaries just produced.
pub fn joint_train(
    world: &World,
    train: &[DatasetRecord],
    probe: &[DatasetRecord],
    base: Option<&ParamStore>,
    model: &ModelConfig,
    config: &JointConfig,
) -> Result<JointOutcome, TrainerError> {
    config.validate()?;
    let seed = config.seed;
    let mut models = Models::new(model, base, seed);
    if config.warm_start_rm {
        let mut btl = RewardLearner::new(RmVariant::Btl, model, seed, false);
        if let Some(base) = base {
            btl.init_from(base);
        }
        train_rm(&mut btl, world, train, &TrainConfig { seed, ..TrainConfig::default() }, None)?;
        models.rm.init_from(&btl.store);
    }
    let probe = &probe[..config.probe_records.min(probe.len())];
    let ppo = &config.ppo;
    let mut actor_adam = AdamState::new(&models.policy_store, AdamConfig::with_lr(ppo.actor_lr));
    let mut critic_adam = AdamState::new(&models.critic_store, AdamConfig::with_lr(ppo.critic_lr));
    let probing_rm = config.rm_probe_iterations > 0;
    if probing_rm {
        let frozen = models.rm.probe_frozen();
        models.rm.freeze(frozen);
    }
    let mut rm_adam = AdamState::new(
        &models.rm.store,
        AdamConfig::with_lr(if probing_rm { config.rm_probe_lr } else { ppo.rm_lr }),
    );
    let contexts: Vec<_> = train.iter().map(|r| r.context.tokens()).collect();
    let vocab = world.vocab.len();
    let mut curves = Vec::new();
    let mut guard = DivergenceGuard::default();
    let mut dropped = 0;
    let mut iteration = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(seed, &[ORDER, epoch as u64]));
        for chunk in order.chunks(ppo.rollout_batch) {
            if probing_rm && iteration == config.rm_probe_iterations {
                models.rm.unfreeze(model.frozen_embeddings);
                rm_adam = AdamState::new(&models.rm.store, AdamConfig::with_lr(ppo.rm_lr));
            }
            let items: Vec<RolloutItem> = chunk
                .iter()
                .map(|&i| {
                    let r = &train[i];
                    let item = RolloutItem {
                        context: contexts[i].clone(),
                        chosen: r.eval.chosen.tokens.clone(),
                        rejected: r.eval.rejected.tokens.clone(),
                    };
                    let mut rng = stream(seed, &[RELABEL, iteration as u64, i as u64]);
                    if config.relabel_rate > 0.0 && rng.random_bool(config.relabel_rate) {
                        let map = Relabeling::random(vocab, &mut rng);
                        RolloutItem {
                            context: map.apply(&item.context),
                            chosen: map.apply(&item.chosen),
                            rejected: map.apply(&item.rejected),
                        }
                    } else {
                        item
                    }
                })
                .collect();
            let (mut trajs, lost) = rollout(&models, &items, ppo, iteration, |i| {
                stream(seed, &[ROLLOUT, iteration as u64, i as u64])
            })?;
            dropped += lost;
            let n = trajs.len().max(1) as f64;
            let mean_reward = trajs.iter().map(|t| t.reward as f64).sum::<f64>() / n;
            let tokens = trajs.iter().map(Trajectory::len).sum::<usize>().max(1) as f64;
            let mean_kl = trajs.iter().flat_map(|t| t.kl.iter()).map(|&k| k as f64).sum::<f64>() / tokens;
            let mut clip_fraction = 0.0;
            if config.update_policy {
                compute_advantages(&mut trajs, ppo)?;
                let d = ppo_update(&mut models, &mut actor_adam, &mut critic_adam, &trajs, ppo, iteration, seed)?;
                clip_fraction = d.clip_fraction;
            }
            let rm_loss = rm_step(&mut models.rm, &mut rm_adam, &trajs, iteration, config.rm_steps)?;
            let probe_accuracy = if !probe.is_empty() && iteration % config.probe_every == 0 {
                Some(probe_accuracy(&models, world, probe)?)
            } else {
                None
            };
            log::info!(
                "iteration {iteration}: R {mean_reward:.4} rm_loss {rm_loss:.4} kl {mean_kl:.5} clip {clip_fraction:.3}{}",
                probe_accuracy.map(|p| format!(" probe {p:.3}")).unwrap_or_default()
            );
            curves.push(CurveRow {
                iteration,
                mean_reward,
                rm_loss,
                mean_kl,
                clip_fraction,
                probe_accuracy,
            });
            if guard.observe(mean_reward) >= config.divergence_window {
                log::warn!("mean reward stayed far below its best for {} iterations; halting", config.divergence_window);
                return Ok(JointOutcome {
                    models,
                    curves,
                    halted: Some(iteration),
                    dropped,
                });
            }
            iteration += 1;
        }
    }
    if let Some(last) = curves.last_mut() {
        if last.probe_accuracy.is_none() && !probe.is_empty() {
            last.probe_accuracy = Some(probe_accuracy(&models, world, probe)?);
        }
    }
    models.rm.unfreeze(model.frozen_embeddings);
    Ok(JointOutcome {
        models,
        curves,
        halted: None,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_dataset, Counts, WorldConfig};

    fn setup() -> (World, Vec<DatasetRecord>, ModelConfig) {
        let mut cfg = WorldConfig::pets();
        cfg.counts = Counts {
            train: 24,
            test_seen: 8,
            test_ood: 8,
            records_per_user: 1,
        };
        let world = World::new(cfg).unwrap();
        let ds = make_dataset(&world, 3).unwrap();
        let model = ModelConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff: 32,
            summary_cap: 3,
            ..ModelConfig::with_vocab(world.vocab.len())
        };
        (world, ds.train, model)
    }

    fn small_config() -> JointConfig {
        JointConfig {
            ppo: PpoConfig {
                rollout_batch: 8,
                ppo_epochs: 1,
                ..PpoConfig::pets()
            },
            epochs: 1,
            rm_probe_iterations: 1,
            probe_every: 2,
            probe_records: 4,
            ..JointConfig::default()
        }
    }

    #[test]
    fn stale_summaries_are_rejected() {
        let (world, train, model) = setup();
        let models = Models::new(&model, None, 0);
        let items: Vec<RolloutItem> = train[..2]
            .iter()
            .map(|r| RolloutItem {
                context: r.context.tokens(),
                chosen: r.eval.chosen.tokens.clone(),
                rejected: r.eval.rejected.tokens.clone(),
            })
            .collect();
        let (trajs, _) = rollout(&models, &items, &PpoConfig::default(), 4, |i| stream(0, &[i as u64])).unwrap();
        let mut rm = models.rm.clone();
        let mut adam = AdamState::new(&rm.store, AdamConfig::with_lr(1e-3));
        assert_eq!(
            rm_step(&mut rm, &mut adam, &trajs, 5, 1),
            Err(TrainerError::StaleSummaries { expected: 5, found: 4 })
        );
        assert!(rm_step(&mut rm, &mut adam, &trajs, 4, 1).is_ok());
        let _ = world;
    }

    #[test]
    fn zero_lr_rm_step_keeps_parameters() {
        let (_, train, model) = setup();
        let models = Models::new(&model, None, 0);
        let items: Vec<RolloutItem> = train[..3]
            .iter()
            .map(|r| RolloutItem {
                context: r.context.tokens(),
                chosen: r.eval.chosen.tokens.clone(),
                rejected: r.eval.rejected.tokens.clone(),
            })
            .collect();
        let (trajs, _) = rollout(&models, &items, &PpoConfig::default(), 0, |i| stream(0, &[i as u64])).unwrap();
        let mut rm = models.rm.clone();
        let before = rm.store.clone();
        let mut adam = AdamState::new(&rm.store, AdamConfig::with_lr(0.0));
        let loss = rm_step(&mut rm, &mut adam, &trajs, 0, 1).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        for ((_, _, a), (_, _, b)) in before.iter().zip(rm.store.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn duplicated_batch_matches_single_record() {
        let (_, train, model) = setup();
        let models = Models::new(&model, None, 0);
        let r = &train[0];
        let item = RolloutItem {
            context: r.context.tokens(),
            chosen: r.eval.chosen.tokens.clone(),
            rejected: r.eval.rejected.tokens.clone(),
        };
        let (one, _) = rollout(&models, std::slice::from_ref(&item), &PpoConfig::default(), 0, |_| stream(0, &[])).unwrap();
        let three: Vec<Trajectory> = vec![one[0].clone(); 3];
        let conds: Vec<Condition> = three
            .iter()
            .map(|t| Condition::Prefix(summary_prefix(crate::models::strip_eos(&t.z))))
            .collect();
        let pair = bare_pair(&item.chosen, &item.rejected);
        let (g1, l1, _) = models.rm.batch_gradients(&[(&conds[0], &pair)], |_| None).unwrap();
        let items: Vec<_> = conds.iter().map(|c| (c, &pair)).collect();
        let (g3, l3, _) = models.rm.batch_gradients(&items, |_| None).unwrap();
        assert!((l1 - l3).abs() < 1e-6);
        for (id, a) in g1.iter() {
            let b = g3.get(id).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn joint_run_is_deterministic_and_logs_curves() {
        let (world, train, model) = setup();
        let cfg = small_config();
        let a = joint_train(&world, &train, &train[..4], None, &model, &cfg).unwrap();
        let b = joint_train(&world, &train, &train[..4], None, &model, &cfg).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.curves.len(), 3);
        assert_eq!(a.dropped, 0);
        assert!(a.curves.iter().all(|c| c.mean_reward < 0.0));
        assert!(a.curves[0].probe_accuracy.is_some() && a.curves[2].probe_accuracy.is_some());
        let csv = curves_csv(&a.curves);
        assert!(csv.starts_with("iteration,mean_R,rm_loss,mean_kl,clip_frac,probe_accuracy\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn ablation_keeps_policy_at_reference() {
        let (world, train, model) = setup();
        let cfg = JointConfig {
            update_policy: false,
            ..small_config()
        };
        let out = joint_train(&world, &train, &[], None, &model, &cfg).unwrap();
        for ((_, _, a), (_, _, b)) in out.models.policy_store.iter().zip(out.models.reference.iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(out.curves.iter().all(|c| c.mean_kl == 0.0));
    }

    #[test]
    fn guard_counts_consecutive_bad_iterations() {
        let mut g = DivergenceGuard::default();
        assert_eq!(g.observe(-0.4), 0);
        assert_eq!(g.observe(-0.7), 1);
        assert_eq!(g.observe(-0.5), 0);
        assert_eq!(g.observe(-0.61), 1);
        assert_eq!(g.observe(-0.9), 2);
        assert_eq!(g.observe(-0.2), 0);
    }
}
