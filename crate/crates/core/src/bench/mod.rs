//! Preference prediction, Best-of-N personalization and the benchmark
//! harness comparing every variant on seen and out-of-distribution users.

mod report;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::models::{write_checkpoint, ModelConfig, ModelError, Summarizer};
use crate::params::ParamStore;
use crate::reward::{evaluate, summary_prefix, train_rm, EpochMetrics, EvalStats, RewardError, RewardLearner, RmVariant, SummaryBook, TrainConfig};
use crate::rng::{stream, Rng};
use crate::trainer::{greedy_summaries, joint_train, CurveRow, JointConfig, Models, TrainerError};
use crate::world::{sha256_hex, Dataset, DatasetRecord, Population, Segment, Split, Token, World, WorldError};

pub use report::{aggregate, report_csv, report_markdown, summaries_jsonl, Aggregate, ReportRow};

const WIN: u64 = 0x5749;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid benchmark spec: {0}")]
    Spec(String),
    #[error("only {distinct} distinct candidates could be rendered, {wanted} requested")]
    TooFewCandidates { wanted: usize, distinct: usize },
    #[error("parameters of {variant} seed {seed} changed between splits")]
    ImpureOod { variant: Variant, seed: u64 },
    #[error("training of {variant} seed {seed} halted by the divergence guard at iteration {iteration}")]
    Diverged { variant: Variant, seed: u64, iteration: usize },
}

/// Rows of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Btl,
    Dpl,
    Vpl,
    Icl,
    PlusUntrained,
    Plus,
    Oracle,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Btl,
        Variant::Dpl,
        Variant::Vpl,
        Variant::Icl,
        Variant::PlusUntrained,
        Variant::Plus,
        Variant::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Btl => "btl",
            Variant::Dpl => "dpl",
            Variant::Vpl => "vpl",
            Variant::Icl => "icl",
            Variant::PlusUntrained => "plus-untrained",
            Variant::Plus => "plus",
            Variant::Oracle => "oracle",
        }
    }

    /// The supervised reward variant, if this is not a joint run.
    pub fn reward_variant(self) -> Option<RmVariant> {
        match self {
            Variant::Btl => Some(RmVariant::Btl),
            Variant::Dpl => Some(RmVariant::Dpl),
            Variant::Vpl => Some(RmVariant::Vpl),
            Variant::Icl => Some(RmVariant::Icl),
            Variant::Oracle => Some(RmVariant::Oracle),
            Variant::PlusUntrained | Variant::Plus => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub splits: Vec<Split>,
    /// Candidates per Best-of-N pick.
    pub best_of: usize,
    /// Records scored by the win-rate evaluation.
    pub win_records: usize,
    /// Use the variational latent for the VPL baseline.
    pub vpl_variational: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            splits: vec![Split::TestSeen, Split::TestOod],
            best_of: 4,
            win_records: 200,
            vpl_variational: false,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.seeds.is_empty() {
            return Err(BenchError::Spec("at least one seed is required".into()));
        }
        if self.variants.is_empty() {
            return Err(BenchError::Spec("at least one variant is required".into()));
        }
        if let Some(s) = self.splits.iter().find(|s| **s == Split::Train) {
            return Err(BenchError::Spec(format!("cannot benchmark on the {} split", s.as_str())));
        }
        if self.best_of == 0 {
            return Err(BenchError::Spec("best_of must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a variant needs to train.
#[derive(Debug, Clone, Copy)]
pub struct Lab<'a> {
    pub world: &'a World,
    pub data: &'a Dataset,
    /// Pretrained trunk every model starts from.
    pub base: Option<&'a ParamStore>,
    pub model: &'a ModelConfig,
    pub rm: &'a TrainConfig,
    pub joint: &'a JointConfig,
    pub vpl_variational: bool,
}

/// A trained variant.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Trained {
    Reward(RewardLearner),
    Joint(Models),
}

/// What training produced besides the parameters.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub curves: Vec<CurveRow>,
    pub halted: Option<usize>,
}

impl Trained {
    pub fn rm(&self) -> &RewardLearner {
        match self {
            Trained::Reward(l) => l,
            Trained::Joint(m) => &m.rm,
        }
    }

    /// Named parameter stores in a fixed order.
    pub fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        match self {
            Trained::Reward(l) => vec![("rm", &l.store)],
            Trained::Joint(m) => vec![("pi", &m.policy_store), ("rm", &m.rm.store), ("critic", &m.critic_store)],
        }
    }

    /// SHA-256 over the serialized parameters.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for (name, store) in self.stores() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend(write_checkpoint("", store));
        }
        sha256_hex(&bytes)
    }

    /// Greedy summaries of the users in `records`, for joint runs.
    pub fn summaries(&self, records: &[DatasetRecord]) -> Result<Option<SummaryBook>, BenchError> {
        match self {
            Trained::Reward(_) => Ok(None),
            Trained::Joint(m) => Ok(Some(greedy_summaries(m, records)?)),
        }
    }

    pub fn evaluate(&self, world: &World, records: &[DatasetRecord]) -> Result<EvalStats, BenchError> {
        let book = self.summaries(records)?;
        Ok(evaluate(self.rm(), world, records, book.as_ref())?)
    }
}

/// Trains one variant from scratch on the training split.
pub fn train_variant(lab: &Lab<'_>, variant: Variant, seed: u64) -> Result<(Trained, TrainLog), BenchError> {
    if let Some(rv) = variant.reward_variant() {
        let mut learner = RewardLearner::new(rv, lab.model, seed, lab.vpl_variational);
        if let Some(base) = lab.base {
            learner.init_from(base);
        }
        let cfg = TrainConfig { seed, ..*lab.rm };
        let epochs = train_rm(&mut learner, lab.world, &lab.data.train, &cfg, None)?;
        return Ok((Trained::Reward(learner), TrainLog { epochs, ..TrainLog::default() }));
    }
    let cfg = JointConfig {
        seed,
        update_policy: variant == Variant::Plus,
        ..*lab.joint
    };
    let out = joint_train(lab.world, &lab.data.train, &lab.data.test_seen, lab.base, lab.model, &cfg)?;
    let log = TrainLog {
        curves: out.curves,
        halted: out.halted,
        ..TrainLog::default()
    };
    Ok((Trained::Joint(out.models), log))
}

/// Chosen candidate and the summary behind the decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// 1 or 2; a tie goes to 1.
    pub index: usize,
    pub margin: f32,
    pub summary: Vec<Token>,
}

/// Summarizes the context greedily, then picks the response the
/// summary-conditioned reward model scores higher.
pub fn predict_preference(
    policy: &Summarizer,
    policy_store: &ParamStore,
    rm: &RewardLearner,
    context: &[Token],
    first: &[Token],
    second: &[Token],
) -> Result<Prediction, BenchError> {
    let z = policy.sample(policy_store, context, 0.0, &mut stream(0, &[]))?;
    let prefix = summary_prefix(z.content());
    let a = rm.model.reward(&rm.store, Some(&prefix), first)?;
    let b = rm.model.reward(&rm.store, Some(&prefix), second)?;
    let margin = a - b;
    Ok(Prediction {
        index: if margin >= 0.0 { 1 } else { 2 },
        margin,
        summary: z.content().to_vec(),
    })
}

/// Up to `n` distinct segments drawn from pairs the world renders for `user`.
pub fn candidates(world: &World, record: &DatasetRecord, pop: Population, n: usize, rng: &mut Rng) -> Result<Vec<Segment>, BenchError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for _ in 0..16 * n.max(1) {
        if out.len() >= n {
            break;
        }
        let pair = world.sample_pair(&record.user, pop, 0.0, rng)?;
        for s in [pair.chosen, pair.rejected] {
            if out.len() < n && seen.insert(s.tokens.clone()) {
                out.push(s);
            }
        }
    }
    if out.len() < n {
        return Err(BenchError::TooFewCandidates { wanted: n, distinct: out.len() });
    }
    Ok(out)
}

/// Best-of-N picks with and without the user's summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Personalized {
    pub conditioned: Segment,
    pub unconditioned: Segment,
    pub summary: Vec<Token>,
}

fn best(rm: &RewardLearner, prefix: Option<&[Token]>, cands: &[Segment]) -> Result<usize, BenchError> {
    let mut top = (0, f32::NEG_INFINITY);
    for (i, c) in cands.iter().enumerate() {
        let r = rm.model.reward(&rm.store, prefix, &c.tokens)?;
        if r > top.1 {
            top = (i, r);
        }
    }
    Ok(top.0)
}

/// Scores `candidates` under the greedy summary of `context` and returns the
/// best one, plus the best one under no conditioning. Ties keep the earlier
/// candidate.
pub fn personalize_response(
    policy: &Summarizer,
    policy_store: &ParamStore,
    rm: &RewardLearner,
    context: &[Token],
    candidates: &[Segment],
) -> Result<Personalized, BenchError> {
    if candidates.is_empty() {
        return Err(BenchError::TooFewCandidates { wanted: 1, distinct: 0 });
    }
    let z = policy.sample(policy_store, context, 0.0, &mut stream(0, &[]))?;
    let prefix = summary_prefix(z.content());
    let c = best(rm, Some(&prefix), candidates)?;
    let u = best(rm, None, candidates)?;
    Ok(Personalized {
        conditioned: candidates[c].clone(),
        unconditioned: candidates[u].clone(),
        summary: z.content().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct WinRate {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinRate {
    /// Share of wins, with ties split evenly.
    pub fn rate(&self) -> f64 {
        let n = self.wins + self.ties + self.losses;
        if n == 0 {
            return 0.5;
        }
        (self.wins as f64 + 0.5 * self.ties as f64) / n as f64
    }
}

/// Oracle-judged comparison of conditioned and unconditioned Best-of-N
/// picks over the first `limit` records.
pub fn win_rate_eval(
    world: &World,
    models: &Models,
    records: &[DatasetRecord],
    pop: Population,
    n: usize,
    limit: usize,
    seed: u64,
) -> Result<WinRate, BenchError> {
    let mut tally = WinRate::default();
    for (i, r) in records.iter().take(limit).enumerate() {
        let cands = candidates(world, r, pop, n, &mut stream(seed, &[WIN, i as u64]))?;
        let p = personalize_response(&models.policy, &models.policy_store, &models.rm, &r.context.tokens(), &cands)?;
        let a = world.oracle_reward(&r.user, &p.conditioned);
        let b = world.oracle_reward(&r.user, &p.unconditioned);
        match a.total_cmp(&b) {
            std::cmp::Ordering::Greater => tally.wins += 1,
            std::cmp::Ordering::Equal => tally.ties += 1,
            std::cmp::Ordering::Less => tally.losses += 1,
        }
    }
    Ok(tally)
}

pub fn population(split: Split) -> Population {
    match split {
        Split::TestOod => Population::OutOfDistribution,
        _ => Population::InDistribution,
    }
}

/// Per-variant evaluation on every split of the spec. The parameter digest
/// is taken before the first split and after the last; a change is an error.
pub fn evaluate_splits(
    world: &World,
    data: &Dataset,
    trained: &Trained,
    variant: Variant,
    seed: u64,
    splits: &[Split],
) -> Result<Vec<ReportRow>, BenchError> {
    let before = trained.digest();
    let mut rows = Vec::with_capacity(splits.len());
    for &split in splits {
        let records = data.split(split);
        let stats = trained.evaluate(world, records)?;
        rows.push(ReportRow {
            variant,
            split,
            seed,
            accuracy: stats.accuracy,
            tie_rate: stats.tie_rate,
            n_pairs: stats.n,
            params_digest: before.clone(),
        });
    }
    if trained.digest() != before {
        return Err(BenchError::ImpureOod { variant, seed });
    }
    Ok(rows)
}

/// Result of a full benchmark.
#[derive(Debug, Clone, Default)]
pub struct BenchOutcome {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    /// Greedy summaries of the trained PLUS policy per seed and split.
    pub summaries: Vec<(u64, Split, SummaryBook)>,
    pub win_rates: Vec<(u64, WinRate)>,
}

/// Trains every variant for every seed, or takes it from `load`, then
/// evaluates it on every split without further updates.
pub fn run_benchmark(
    spec: &BenchmarkSpec,
    lab: &Lab<'_>,
    mut load: impl FnMut(Variant, u64) -> Result<Option<Trained>, BenchError>,
    mut store: impl FnMut(Variant, u64, &Trained, &TrainLog) -> Result<(), BenchError>,
) -> Result<BenchOutcome, BenchError> {
    spec.validate()?;
    let mut out = BenchOutcome::default();
    for &variant in &spec.variants {
        for &seed in &spec.seeds {
            let trained = match load(variant, seed)? {
                Some(t) => t,
                None => {
                    let (t, log) = train_variant(lab, variant, seed)?;
                    if let Some(iteration) = log.halted {
                        return Err(BenchError::Diverged { variant, seed, iteration });
                    }
                    store(variant, seed, &t, &log)?;
                    t
                }
            };
            log::info!("evaluating {variant} seed {seed}");
            out.rows.extend(evaluate_splits(lab.world, lab.data, &trained, variant, seed, &spec.splits)?);
            if let (Variant::Plus, Trained::Joint(m)) = (variant, &trained) {
                for &split in &spec.splits {
                    out.summaries.push((seed, split, greedy_summaries(m, lab.data.split(split))?));
                }
                let wr = win_rate_eval(lab.world, m, &lab.data.test_seen, Population::InDistribution, spec.best_of, spec.win_records, seed)?;
                out.win_rates.push((seed, wr));
            }
        }
    }
    out.aggregates = aggregate(&out.rows);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_dataset, WorldConfig};

    fn tiny() -> (World, Dataset, ModelConfig) {
        let mut wc = WorldConfig::pets();
        wc.counts.train = 8;
        wc.counts.test_seen = 6;
        wc.counts.test_ood = 6;
        let world = World::new(wc).unwrap();
        let data = make_dataset(&world, 0).unwrap();
        let model = ModelConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff: 32,
            summary_cap: 3,
            ..ModelConfig::with_vocab(world.vocab.len())
        };
        (world, data, model)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("plus_untrained".parse::<Variant>().is_err());
    }

    #[test]
    fn identical_responses_tie_to_the_first() {
        let (world, data, model) = tiny();
        let m = Models::new(&model, None, 1);
        let r = &data.test_seen[0];
        let y = &r.eval.chosen.tokens;
        let p = predict_preference(&m.policy, &m.policy_store, &m.rm, &r.context.tokens(), y, y).unwrap();
        assert_eq!(p.index, 1);
        assert_eq!(p.margin, 0.0);
        let _ = world;
    }

    #[test]
    fn swapping_responses_swaps_the_pick() {
        let (_, data, model) = tiny();
        let m = Models::new(&model, None, 2);
        for r in &data.test_seen {
            let (a, b) = (&r.eval.chosen.tokens, &r.eval.rejected.tokens);
            let ctx = r.context.tokens();
            let p = predict_preference(&m.policy, &m.policy_store, &m.rm, &ctx, a, b).unwrap();
            let q = predict_preference(&m.policy, &m.policy_store, &m.rm, &ctx, b, a).unwrap();
            if p.margin != 0.0 {
                assert_eq!(p.index + q.index, 3);
            }
        }
    }

    #[test]
    fn prediction_agrees_with_accuracy() {
        let (world, data, model) = tiny();
        let m = Models::new(&model, None, 3);
        let book = greedy_summaries(&m, &data.test_seen).unwrap();
        let stats = evaluate(&m.rm, &world, &data.test_seen, Some(&book)).unwrap();
        let hits = data
            .test_seen
            .iter()
            .filter(|r| {
                let p = predict_preference(&m.policy, &m.policy_store, &m.rm, &r.context.tokens(), &r.eval.chosen.tokens, &r.eval.rejected.tokens).unwrap();
                p.index == 1
            })
            .count();
        assert_eq!(hits as f64 / data.test_seen.len() as f64, stats.accuracy);
    }

    #[test]
    fn one_candidate_gives_even_win_rate() {
        let (world, data, model) = tiny();
        let m = Models::new(&model, None, 4);
        let wr = win_rate_eval(&world, &m, &data.test_seen, Population::InDistribution, 1, 6, 0).unwrap();
        assert_eq!(wr.ties, 6);
        assert_eq!(wr.rate(), 0.5);
    }

    #[test]
    fn too_many_candidates_is_an_error() {
        let mut wc = WorldConfig::pets();
        wc.fillers = 4;
        let world = World::new(wc).unwrap();
        let user = world.sample_user(0, Population::InDistribution, &mut stream(0, &[])).unwrap();
        let data = make_dataset(&world, 0).unwrap();
        let record = DatasetRecord { user, ..data.test_seen[0].clone() };
        let err = candidates(&world, &record, Population::InDistribution, 5000, &mut stream(0, &[])).unwrap_err();
        assert!(matches!(err, BenchError::TooFewCandidates { wanted: 5000, .. }), "{err}");
    }

    #[test]
    fn spec_needs_a_seed() {
        let spec = BenchmarkSpec { seeds: vec![], ..BenchmarkSpec::default() };
        assert!(spec.validate().is_err());
        assert!(BenchmarkSpec { splits: vec![Split::Train], ..BenchmarkSpec::default() }.validate().is_err());
    }
}
