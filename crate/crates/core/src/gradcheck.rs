//! Finite-difference checks of every model head against the tape.
//!
//! Each instance builds a small randomly initialized model, a random input
//! and the training loss of one head. The analytic derivative along a
//! direction mixing the gradient with a random vector is compared with a
//! central difference along the same direction.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::models::{decision_input, ModelConfig};
use crate::params::{Gradients, ParamStore};
use crate::reward::{summary_prefix, Condition, RewardLearner, RmVariant};
use crate::rng::{stream, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{actor_terms, critic_terms, Models, Trajectory, TrainerError};
use crate::world::{Token, EOS, SPECIALS};

const VOCAB: usize = SPECIALS.len() + 16;
const NOISE_STREAM: u64 = 0x4e5a;
/// Central-difference step along a unit direction.
pub const STEP: f32 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Next-token log-likelihood of the summarizer.
    Language,
    /// Clipped PPO surrogate of the summarizer.
    Actor,
    /// Squared error of the value critic.
    Critic,
    Btl,
    Dpl,
    Summary,
    Icl,
    /// Variational context latent with a fixed noise draw.
    Latent,
}

impl Head {
    pub const ALL: [Head; 8] = [
        Head::Language,
        Head::Actor,
        Head::Critic,
        Head::Btl,
        Head::Dpl,
        Head::Summary,
        Head::Icl,
        Head::Latent,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Check {
    pub head: Head,
    pub seed: u64,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        ff: 32,
        max_seq: 64,
        summary_cap: 4,
        latent_dim: 4,
        ..ModelConfig::with_vocab(VOCAB)
    }
}

fn tokens(rng: &mut Rng, len: std::ops::Range<usize>) -> Vec<Token> {
    let n = if len.len() > 1 { rng.random_range(len) } else { len.start };
    (0..n).map(|_| rng.random_range(SPECIALS.len()..VOCAB)).collect()
}

type LossFn = Box<dyn Fn(&ParamStore, bool) -> Result<(f64, Option<Gradients>), TrainerError>>;

/// One model, one input, one loss: the store being perturbed plus a
/// closure that evaluates the loss from it.
struct Instance {
    store: ParamStore,
    loss: LossFn,
}

fn run(tape: &mut Tape, loss: crate::tape::Var, grad: bool) -> Result<(f64, Option<Gradients>), TrainerError> {
    let value = tape.value(loss).item() as f64;
    let g = if grad { Some(tape.backward(loss)?) } else { None };
    Ok((value, g))
}

fn reward_instance(head: Head, seed: u64, rng: &mut Rng) -> Instance {
    let cfg = tiny_config();
    let variant = match head {
        Head::Btl => RmVariant::Btl,
        Head::Dpl => RmVariant::Dpl,
        Head::Icl => RmVariant::Icl,
        Head::Latent => RmVariant::Vpl,
        _ => RmVariant::Summary,
    };
    let learner = RewardLearner::new(variant, &cfg, seed, head == Head::Latent);
    let chosen = tokens(rng, 3..8);
    let rejected = tokens(rng, 3..8);
    let cond = match head {
        Head::Summary => Condition::Prefix(summary_prefix(&tokens(rng, 3..4))),
        Head::Icl => Condition::Prefix(tokens(rng, 12..13)),
        Head::Latent => Condition::Context(tokens(rng, 12..13)),
        _ => Condition::None,
    };
    let store = learner.store.clone();
    Instance {
        store,
        loss: Box::new(move |store, grad| {
            let mut l = learner.clone();
            l.store = store.clone();
            let mut tape = Tape::new();
            let mut noise = stream(seed, &[NOISE_STREAM]);
            let (loss, _) = l.pair_loss(&mut tape, &cond, &chosen, &rejected, Some(&mut noise))?;
            run(&mut tape, loss, grad)
        }),
    }
}

fn policy_instance(head: Head, seed: u64, rng: &mut Rng) -> Result<Instance, TrainerError> {
    let cfg = tiny_config();
    let models = Models::new(&cfg, None, seed);
    let context = tokens(rng, 10..11);
    let mut z = tokens(rng, 1..4);
    z.push(EOS);
    let input = decision_input(&context, &z);
    match head {
        Head::Language => {
            let store = models.policy_store.clone();
            Ok(Instance {
                store,
                loss: Box::new(move |store, grad| {
                    let mut tape = Tape::new();
                    let lp = models.policy.log_policy(&mut tape, store, &input, z.len())?;
                    let picked = tape.pick(lp, &z)?;
                    let sum = tape.sum(picked)?;
                    let loss = tape.scale(sum, -1.0)?;
                    run(&mut tape, loss, grad)
                }),
            })
        }
        _ => {
            let mut tape = Tape::new();
            let lp = models.policy.log_policy(&mut tape, &models.policy_store, &input, z.len())?;
            let now = tape.pick(lp, &z)?;
            // Old log-probabilities close to the current ones keep every
            // ratio well inside the clip range, away from its kinks.
            let old = tape.value(now).data().iter().map(|&x| x + rng.random_range(-0.05..0.05)).collect();
            let n = z.len();
            let traj = Trajectory {
                iteration: 0,
                context,
                chosen: vec![],
                rejected: vec![],
                z,
                old_logprobs: old,
                kl: vec![0.0; n],
                values: vec![0.0; n],
                reward: 0.0,
                advantages: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
                returns: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            };
            let actor = head == Head::Actor;
            let store = if actor { models.policy_store.clone() } else { models.critic_store.clone() };
            Ok(Instance {
                store,
                loss: Box::new(move |store, grad| {
                    let mut m = models.clone();
                    if actor {
                        m.policy_store = store.clone();
                    } else {
                        m.critic_store = store.clone();
                    }
                    let mut tape = Tape::new();
                    let loss = if actor {
                        actor_terms(&m, &mut tape, &traj, 0.2)?.loss
                    } else {
                        critic_terms(&m, &mut tape, &traj)?
                    };
                    run(&mut tape, loss, grad)
                }),
            })
        }
    }
}

fn shifted(store: &ParamStore, dir: &[(crate::params::ParamId, Tensor)], step: f32) -> ParamStore {
    let mut out = store.clone();
    for (id, d) in dir {
        for (x, dx) in out.get_mut(*id).data_mut().iter_mut().zip(d.data()) {
            *x += step * dx;
        }
    }
    out
}

/// Checks one head on one random instance.
pub fn check(head: Head, seed: u64, step: f32) -> Result<Check, TrainerError> {
    let mut rng = stream(seed, &[0x4743, head as u64]);
    let inst = match head {
        Head::Language | Head::Actor | Head::Critic => policy_instance(head, seed, &mut rng)?,
        _ => reward_instance(head, seed, &mut rng),
    };
    let (_, grads) = (inst.loss)(&inst.store, true)?;
    let grads = grads.unwrap_or_default();
    let gnorm = grads.global_norm().max(1e-12);
    // Half along the gradient so the derivative is never vanishingly
    // small, half random so every coordinate is exercised.
    let mut dir = Vec::new();
    let mut sq = 0.0f64;
    for (id, _, t) in inst.store.iter() {
        let data: Vec<f32> = match grads.get(id) {
            Some(g) => g.data().iter().map(|&x| (x as f64 / gnorm) as f32 + 0.05 * rng.sample::<f32, _>(StandardNormal)).collect(),
            None => (0..t.len()).map(|_| 0.05 * rng.sample::<f32, _>(StandardNormal)).collect(),
        };
        sq += data.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        dir.push((id, Tensor::new(t.shape().to_vec(), data)?));
    }
    let norm = sq.sqrt() as f32;
    for (_, d) in &mut dir {
        d.data_mut().iter_mut().for_each(|x| *x /= norm);
    }
    let analytic: f64 = dir
        .iter()
        .filter_map(|(id, d)| grads.get(*id).map(|g| g.data().iter().zip(d.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()))
        .sum();
    let (up, _) = (inst.loss)(&shifted(&inst.store, &dir, step), false)?;
    let (down, _) = (inst.loss)(&shifted(&inst.store, &dir, -step), false)?;
    let numeric = (up - down) / (2.0 * step as f64);
    let scale = analytic.abs().max(numeric.abs()).max(1e-12);
    Ok(Check {
        head,
        seed,
        analytic,
        numeric,
        rel_error: (analytic - numeric).abs() / scale,
    })
}

/// `instances` checks cycling over all heads.
pub fn suite(instances: usize, seed: u64) -> Result<Vec<Check>, TrainerError> {
    (0..instances)
        .map(|i| check(Head::ALL[i % Head::ALL.len()], seed.wrapping_add(i as u64), STEP))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_head_passes_once() {
        for head in Head::ALL {
            let c = check(head, 3, STEP).unwrap();
            assert!(c.rel_error < 1e-3, "{c:?}");
            assert!(c.analytic.abs() > 1e-4, "{c:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let c = check(Head::Btl, 5, STEP).unwrap();
        let scale = c.analytic.abs().max(c.numeric.abs());
        assert!(((c.analytic * 1.01) - c.numeric).abs() / scale > 1e-3);
    }
}
