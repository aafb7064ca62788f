use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{btl_loss, dpl_loss, RewardError, RmVariant, SummaryBook, TrainConfig};
use crate::adam::{AdamConfig, AdamState};
use crate::models::{ContextEncoder, ModelConfig, RewardHead, RewardModel, RmInput};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::rng::{stream, Rng};
use crate::tape::{Tape, Var};
use crate::world::{DatasetRecord, PreferencePair, Token, World, SEP, SPECIALS, SUM};

const SHUFFLE: u64 = 0x5348;
const NOISE: u64 = 0x4e4f;
const RELABEL: u64 = 0x524c;

/// A random bijection on the non-structural tokens, applied consistently to
/// a whole record so only token identity changes, never token relations.
#[derive(Debug, Clone, PartialEq)]
pub struct Relabeling(Vec<Token>);

impl Relabeling {
    pub fn random(vocab: usize, rng: &mut Rng) -> Self {
        let mut map: Vec<Token> = (0..vocab).collect();
        if vocab > SPECIALS.len() {
            map[SPECIALS.len()..].shuffle(rng);
        }
        Self(map)
    }

    pub fn apply(&self, tokens: &[Token]) -> Vec<Token> {
        tokens.iter().map(|&t| self.0.get(t).copied().unwrap_or(t)).collect()
    }

    pub fn condition(&self, cond: &Condition) -> Condition {
        match cond {
            Condition::None => Condition::None,
            Condition::Prefix(p) => Condition::Prefix(self.apply(p)),
            Condition::Context(c) => Condition::Context(self.apply(c)),
        }
    }

    pub fn pair(&self, pair: &PreferencePair) -> PreferencePair {
        let mut out = pair.clone();
        out.chosen.tokens = self.apply(&pair.chosen.tokens);
        out.rejected.tokens = self.apply(&pair.rejected.tokens);
        out
    }
}

/// `SUM z SEP`.
pub fn summary_prefix(z: &[Token]) -> Vec<Token> {
    let mut p = Vec::with_capacity(z.len() + 2);
    p.push(SUM);
    p.extend_from_slice(z);
    p.push(SEP);
    p
}

/// Conditioning input resolved for one record.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    None,
    Prefix(Vec<Token>),
    /// Raw context for the latent encoder.
    Context(Vec<Token>),
}

/// Decision on one pair: `margin = r_a − r_b`; ties go to `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutcome {
    pub margin: f32,
}

impl PairOutcome {
    pub fn correct(self) -> bool {
        self.margin >= 0.0
    }

    pub fn tie(self) -> bool {
        self.margin == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalStats {
    pub accuracy: f64,
    pub tie_rate: f64,
    pub n: usize,
}

impl EvalStats {
    pub fn from_outcomes(outcomes: &[PairOutcome]) -> Self {
        let n = outcomes.len();
        if n == 0 {
            return Self::default();
        }
        let correct = outcomes.iter().filter(|o| o.correct()).count();
        let ties = outcomes.iter().filter(|o| o.tie()).count();
        Self {
            accuracy: correct as f64 / n as f64,
            tie_rate: ties as f64 / n as f64,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub tie_rate: f64,
}

/// A reward model of one variant together with its parameters.
#[derive(Debug, Clone)]
pub struct RewardLearner {
    pub variant: RmVariant,
    pub model: RewardModel,
    pub encoder: Option<ContextEncoder>,
    pub store: ParamStore,
    pub kl_weight: f32,
    frozen: BTreeSet<ParamId>,
}

impl RewardLearner {
    /// `variational` only affects the latent variant.
    pub fn new(variant: RmVariant, config: &ModelConfig, seed: u64, variational: bool) -> Self {
        let mut rng = stream(seed, &[0x524d]);
        let mut store = ParamStore::new();
        let head = match variant {
            RmVariant::Dpl => RewardHead::Gaussian,
            _ => RewardHead::Scalar,
        };
        let latent = variant == RmVariant::Vpl;
        let model = RewardModel::new(&mut store, config, head, latent, &mut rng);
        let encoder = latent.then(|| ContextEncoder::new(&mut store, config, variational, &mut rng));
        let mut frozen = BTreeSet::new();
        if config.frozen_embeddings {
            frozen.insert(model.trunk.token_embedding());
            frozen.extend(encoder.as_ref().map(|e| e.trunk.token_embedding()));
        }
        Self {
            variant,
            model,
            encoder,
            store,
            kl_weight: TrainConfig::default().kl_weight,
            frozen,
        }
    }

    /// Copies every matching parameter from a pretrained store.
    pub fn init_from(&mut self, base: &ParamStore) -> usize {
        self.store.load_matching(base)
    }

    /// Keeps the given parameters fixed during training.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    /// Makes every parameter trainable again except the token embedding
    /// when the config keeps it fixed.
    pub fn unfreeze(&mut self, keep_embeddings_fixed: bool) {
        self.frozen.clear();
        if keep_embeddings_fixed {
            self.frozen.insert(self.model.trunk.token_embedding());
        }
    }

    /// Parameters held fixed in the probe phase: everything except the
    /// reward head, the latent projection and the trunk's final norm.
    pub fn probe_frozen(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| !(name.starts_with("rm.") || name.starts_with("trunk.lnf")))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn frozen(&self) -> &BTreeSet<ParamId> {
        &self.frozen
    }

    /// Resolves the conditioning input for `record`.
    pub fn condition(&self, world: &World, record: &DatasetRecord, summaries: Option<&SummaryBook>) -> Result<Condition, RewardError> {
        Ok(match self.variant {
            RmVariant::Btl | RmVariant::Dpl => Condition::None,
            RmVariant::Icl => Condition::Prefix(record.context.tokens()),
            RmVariant::Vpl => Condition::Context(record.context.tokens()),
            RmVariant::Oracle => Condition::Prefix(summary_prefix(&world.oracle_tokens(&record.user))),
            RmVariant::Summary => {
                let book = summaries.ok_or(RewardError::NeedsSummaries(self.variant))?;
                let z = book
                    .get(&record.user_id())
                    .ok_or_else(|| RewardError::MissingSummaries(vec![record.user_id()]))?;
                Condition::Prefix(summary_prefix(z))
            }
        })
    }

    /// Conditions for every record, failing with the full list of users
    /// that lack a summary.
    pub fn conditions(&self, world: &World, records: &[DatasetRecord], summaries: Option<&SummaryBook>) -> Result<Vec<Condition>, RewardError> {
        if self.variant == RmVariant::Summary {
            let book = summaries.ok_or(RewardError::NeedsSummaries(self.variant))?;
            let missing: Vec<u64> = records
                .iter()
                .map(DatasetRecord::user_id)
                .filter(|u| !book.contains_key(u))
                .collect();
            if !missing.is_empty() {
                return Err(RewardError::MissingSummaries(missing));
            }
        }
        records.iter().map(|r| self.condition(world, r, summaries)).collect()
    }

    /// Builds the pair loss on `tape`. Returns the loss and the mean-reward margin.
    pub fn pair_loss(
        &self,
        tape: &mut Tape,
        cond: &Condition,
        chosen: &[Token],
        rejected: &[Token],
        noise: Option<&mut Rng>,
    ) -> Result<(Var, f32), RewardError> {
        let mut kl = None;
        let latent;
        let input = match cond {
            Condition::None => RmInput::None,
            Condition::Prefix(p) => RmInput::Tokens(p),
            Condition::Context(c) => {
                let enc = self
                    .encoder
                    .as_ref()
                    .ok_or_else(|| RewardError::Config("context condition without an encoder".into()))?;
                let out = enc.encode(tape, &self.store, c, true, noise)?;
                kl = out.kl;
                latent = out.latent;
                RmInput::Latent(latent)
            }
        };
        let a = self.model.score(tape, &self.store, input, chosen)?;
        let b = self.model.score(tape, &self.store, input, rejected)?;
        let margin = tape.value(a.mean).item() - tape.value(b.mean).item();
        let mut loss = match (a.variance, b.variance) {
            (Some(va), Some(vb)) => dpl_loss(tape, (a.mean, va), (b.mean, vb))?,
            _ => btl_loss(tape, a.mean, b.mean)?,
        };
        if let Some(kl) = kl {
            let weighted = tape.scale(kl, self.kl_weight)?;
            loss = tape.add(loss, weighted)?;
        }
        Ok((loss, margin))
    }

    /// Decision on one pair without gradients. The Gaussian head decides by its mean.
    pub fn outcome(&self, cond: &Condition, chosen: &[Token], rejected: &[Token]) -> Result<PairOutcome, RewardError> {
        let mut tape = Tape::new();
        let (_, margin) = self.pair_loss(&mut tape, cond, chosen, rejected, None)?;
        Ok(PairOutcome { margin })
    }

    /// Mean-loss gradients over a batch, summed record by record in order.
    /// Returns the gradients, mean loss and per-pair outcomes.
    pub fn batch_gradients(
        &self,
        items: &[(&Condition, &PreferencePair)],
        mut noise: impl FnMut(usize) -> Option<Rng>,
    ) -> Result<(Gradients, f64, Vec<PairOutcome>), RewardError> {
        let mut total = Gradients::new();
        let mut loss_sum = 0.0;
        let mut outcomes = Vec::with_capacity(items.len());
        for (i, (cond, pair)) in items.iter().enumerate() {
            let mut tape = Tape::new();
            let mut rng = noise(i);
            let (loss, margin) = self.pair_loss(&mut tape, cond, &pair.chosen.tokens, &pair.rejected.tokens, rng.as_mut())?;
            loss_sum += tape.value(loss).item() as f64;
            outcomes.push(PairOutcome { margin });
            total.accumulate(&tape.backward(loss)?);
        }
        let n = items.len().max(1);
        total.scale(1.0 / n as f32);
        total.retain(|id| !self.frozen.contains(&id));
        Ok((total, loss_sum / n as f64, outcomes))
    }
}

/// Minimizes the mean pair loss over the eval pairs of `records`: first the
/// probe phase, then full fine-tuning, shuffling each epoch from the seed.
pub fn train_rm(
    learner: &mut RewardLearner,
    world: &World,
    records: &[DatasetRecord],
    config: &TrainConfig,
    summaries: Option<&SummaryBook>,
) -> Result<Vec<EpochMetrics>, RewardError> {
    config.validate()?;
    learner.kl_weight = config.kl_weight;
    let conds = learner.conditions(world, records, summaries)?;
    let vocab = world.vocab.len();
    let base = learner.frozen.clone();
    let probe = learner.probe_frozen();
    let mut metrics = Vec::with_capacity(config.probe_epochs + config.epochs);
    let phases = [(config.probe_epochs, config.probe_lr, true), (config.epochs, config.lr, false)];
    let mut epoch = 0;
    for (count, lr, probing) in phases {
        learner.frozen = base.clone();
        if probing {
            learner.frozen.extend(&probe);
        }
        let mut adam = AdamState::new(&learner.store, AdamConfig::with_lr(lr));
        for _ in 0..count {
            metrics.push(train_epoch(learner, &mut adam, records, &conds, config, vocab, epoch)?);
            epoch += 1;
        }
    }
    learner.frozen = base;
    Ok(metrics)
}

fn train_epoch(
    learner: &mut RewardLearner,
    adam: &mut AdamState,
    records: &[DatasetRecord],
    conds: &[Condition],
    config: &TrainConfig,
    vocab: usize,
    epoch: usize,
) -> Result<EpochMetrics, RewardError> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut stream(config.seed, &[SHUFFLE, epoch as u64]));
    let variational = learner.encoder.as_ref().is_some_and(ContextEncoder::is_variational);
    let mut outcomes = Vec::with_capacity(records.len());
    let mut loss_sum = 0.0;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let shown: Vec<(Condition, PreferencePair)> = chunk
            .iter()
            .map(|&i| {
                let mut rng = stream(config.seed, &[RELABEL, epoch as u64, i as u64]);
                if config.relabel_rate > 0.0 && rng.random_bool(config.relabel_rate) {
                    let map = Relabeling::random(vocab, &mut rng);
                    (map.condition(&conds[i]), map.pair(&records[i].eval))
                } else {
                    (conds[i].clone(), records[i].eval.clone())
                }
            })
            .collect();
        let items: Vec<_> = shown.iter().map(|(c, p)| (c, p)).collect();
        let (grads, loss, outs) = learner.batch_gradients(&items, |i| {
            variational.then(|| stream(config.seed, &[NOISE, epoch as u64, b as u64, i as u64]))
        })?;
        adam.step(&mut learner.store, &grads)?;
        loss_sum += loss * chunk.len() as f64;
        outcomes.extend(outs);
    }
    let stats = EvalStats::from_outcomes(&outcomes);
    let m = EpochMetrics {
        epoch,
        loss: loss_sum / records.len().max(1) as f64,
        accuracy: stats.accuracy,
        tie_rate: stats.tie_rate,
    };
    log::info!("{} epoch {epoch}: loss {:.4} acc {:.3}", learner.variant, m.loss, m.accuracy);
    Ok(m)
}

/// Accuracy of `learner` on the eval pairs of `records`.
pub fn evaluate(
    learner: &RewardLearner,
    world: &World,
    records: &[DatasetRecord],
    summaries: Option<&SummaryBook>,
) -> Result<EvalStats, RewardError> {
    let conds = learner.conditions(world, records, summaries)?;
    let outcomes = records
        .iter()
        .zip(&conds)
        .map(|(r, c)| learner.outcome(c, &r.eval.chosen.tokens, &r.eval.rejected.tokens))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalStats::from_outcomes(&outcomes))
}

/// CSV rows `variant,split,seed,epoch,loss,accuracy,tie_rate` with header.
pub fn metrics_csv(variant: RmVariant, split: &str, seed: u64, rows: &[EpochMetrics]) -> String {
    let mut out = String::from("variant,split,seed,epoch,loss,accuracy,tie_rate\n");
    for m in rows {
        let _ = writeln!(
            out,
            "{variant},{split},{seed},{},{:.6},{:.6},{:.6}",
            m.epoch, m.loss, m.accuracy, m.tie_rate
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_dataset, Counts, Split, WorldConfig};

    fn small_world() -> (World, Vec<DatasetRecord>) {
        let mut cfg = WorldConfig::pets();
        cfg.counts = Counts {
            train: 40,
            test_seen: 8,
            test_ood: 8,
            records_per_user: 1,
        };
        let world = World::new(cfg).unwrap();
        let ds = make_dataset(&world, 1).unwrap();
        (world, ds.split(Split::Train).to_vec())
    }

    fn tiny_model(world: &World) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff: 32,
            ..ModelConfig::with_vocab(world.vocab.len())
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (world, recs) = small_world();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut l = RewardLearner::new(RmVariant::Icl, &tiny_model(&world), 4, false);
            let m = train_rm(&mut l, &world, &recs, &cfg, None).unwrap();
            (l.store, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(ma, mb);
        for ((_, _, x), (_, _, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn summary_variant_requires_summaries() {
        let (world, recs) = small_world();
        let l = RewardLearner::new(RmVariant::Summary, &tiny_model(&world), 1, false);
        assert_eq!(
            evaluate(&l, &world, &recs, None).unwrap_err(),
            RewardError::NeedsSummaries(RmVariant::Summary)
        );
        let mut book = SummaryBook::new();
        book.insert(recs[0].user_id(), vec![]);
        match evaluate(&l, &world, &recs[..3], Some(&book)).unwrap_err() {
            RewardError::MissingSummaries(ids) => assert_eq!(ids, vec![recs[1].user_id(), recs[2].user_id()]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn zero_margin_counts_as_a_tie_toward_chosen() {
        let stats = EvalStats::from_outcomes(&[
            PairOutcome { margin: 0.0 },
            PairOutcome { margin: -1.0 },
            PairOutcome { margin: 2.0 },
            PairOutcome { margin: 0.5 },
        ]);
        assert_eq!(stats.accuracy, 0.75);
        assert_eq!(stats.tie_rate, 0.25);
    }

    #[test]
    fn every_variant_trains_one_step() {
        let (world, recs) = small_world();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut book = SummaryBook::new();
        for r in &recs {
            book.insert(r.user_id(), world.oracle_tokens(&r.user));
        }
        for v in RmVariant::ALL {
            let mut l = RewardLearner::new(v, &tiny_model(&world), 2, v == RmVariant::Vpl);
            let m = train_rm(&mut l, &world, &recs, &cfg, Some(&book)).unwrap();
            assert!(m[0].loss.is_finite(), "{v}");
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = metrics_csv(
            RmVariant::Btl,
            "train",
            3,
            &[EpochMetrics {
                epoch: 0,
                loss: 0.5,
                accuracy: 0.75,
                tie_rate: 0.0,
            }],
        );
        assert_eq!(
            csv,
            "variant,split,seed,epoch,loss,accuracy,tie_rate\nbtl,train,3,0,0.500000,0.750000,0.000000\n"
        );
    }
}
