//! Generic language-model pretraining of the shared trunk.
//!
//! Sequences are random strings over the whole vocabulary and carry no
//! preference signal. Recall sequences reward finding an earlier occurrence
//! of a token and copying its neighbour; digest sequences end in `SUM`
//! followed by a few tokens copied from the text, frequent ones first more
//! often. Token embeddings stay at their random initialization.

use rand::distr::weighted::WeightedIndex;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::models::{ModelConfig, ModelError, Summarizer};
use crate::params::{Gradients, ParamStore};
use crate::rng::{stream, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::world::{Token, World, BOS, CHOSEN, EOS, REJECTED, SPECIALS, SUM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub seed: u64,
    /// Share of sequences that end in a digest rather than plain recall,
    /// once digests are switched on.
    pub digest_rate: f64,
    /// Steps of recall alone before digests enter the mix; matching forms
    /// more reliably without them.
    pub digest_after: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            seq_len: 96,
            lr: 3e-3,
            seed: 0,
            digest_rate: 0.8,
            digest_after: 1600,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Adam(#[from] crate::adam::AdamError),
    #[error("world has too few filler tokens to pretrain on")]
    EmptyPool,
}

/// A pretrained trunk and its per-step loss curve.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub store: ParamStore,
    pub losses: Vec<f64>,
}

const NOVEL_QUERY_RATE: f64 = 0.3;
const MARKER_RATE: f64 = 0.3;
const DIGEST_ITEMS: usize = 20;
const MAX_SPAN: usize = 6;
/// Digest weight of an occurrence in a span led by `REJECTED`.
pub const REJECTED_WEIGHT: f64 = 0.0;

/// Token classes of the pretraining corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPool {
    /// Structural tokens; may repeat within a sequence.
    pub markers: Vec<Token>,
    /// Every non-special token.
    pub content: Vec<Token>,
}

impl CorpusPool {
    pub fn new(world: &World) -> Self {
        let content = (SPECIALS.len()..world.vocab.len()).collect();
        Self {
            markers: (BOS..SPECIALS.len()).filter(|&t| t != SUM).collect(),
            content,
        }
    }

    pub fn contains(&self, t: Token) -> bool {
        self.markers.contains(&t) || self.content.contains(&t)
    }
}

/// One training sequence and the positions whose next token is predictable.
///
/// A list of distinct content tokens, each sometimes followed by a marker,
/// then queries: a content token from the list followed by its successor
/// there. Predicting the successor needs the model to find the earlier
/// occurrence of the query and copy what came after it. Some queries are
/// absent from the list and are followed by a random token, which teaches
/// the model to stay uncommitted when there is nothing to recall.
pub fn recall_sequence(pool: &CorpusPool, len: usize, rng: &mut Rng) -> (Vec<Token>, Vec<bool>) {
    let n = rng.random_range(4..=pool.content.len().min(len / 3).max(4)).min(pool.content.len());
    let items: Vec<Token> = pool.content.choose_multiple(rng, n).copied().collect();
    let mut seq = Vec::with_capacity(len + 1);
    let mut keys = Vec::with_capacity(n);
    for &t in &items {
        keys.push(seq.len());
        seq.push(t);
        if rng.random_bool(MARKER_RATE) {
            seq.push(*pool.markers.choose(rng).unwrap_or(&t));
        }
    }
    let mut target = vec![false; seq.len()];
    let novel: Vec<Token> = pool.content.iter().copied().filter(|t| !items.contains(t)).collect();
    let any: Vec<Token> = pool.markers.iter().chain(&pool.content).copied().collect();
    while seq.len() < len {
        if !novel.is_empty() && rng.random_bool(NOVEL_QUERY_RATE) {
            // An unseen query carries no information about what follows.
            seq.push(novel[rng.random_range(0..novel.len())]);
            seq.push(any[rng.random_range(0..any.len())]);
        } else {
            let &k = keys[..keys.len() - 1].choose(rng).unwrap_or(&0);
            seq.push(seq[k]);
            seq.push(seq[k + 1]);
        }
        target.extend([false, true]);
    }
    seq.truncate(len);
    target.truncate(len);
    (seq, target)
}

/// A text of spans over a few content tokens, each led by `CHOSEN` or
/// `REJECTED` with other markers scattered inside, followed by `SUM`, one to
/// `cap` distinct tokens of the text, and `EOS`. Only the digest is a target.
///
/// Digest tokens are drawn without replacement in proportion to how often
/// they occur, where an occurrence in a `REJECTED` span counts only
/// [`REJECTED_WEIGHT`]. This is the only place the corpus gives a marker
/// any meaning.
pub fn digest_sequence(pool: &CorpusPool, len: usize, cap: usize, rng: &mut Rng) -> (Vec<Token>, Vec<bool>) {
    let cap = cap.max(1);
    let room = len.saturating_sub(cap + 2).max(8);
    let n = rng.random_range(3..=DIGEST_ITEMS).min(pool.content.len());
    let items: Vec<Token> = pool.content.choose_multiple(rng, n).copied().collect();
    // Zipf weights: a few items recur often, most appear once or twice.
    let zipf: Vec<f64> = (1..=n).map(|r| 1.0 / r as f64).collect();
    let pick = WeightedIndex::new(&zipf).expect("positive weights");
    let inner: Vec<Token> = pool.markers.iter().copied().filter(|&t| t != CHOSEN && t != REJECTED).collect();
    let text_len = rng.random_range(room.min(16)..=room);
    let mut seq = Vec::with_capacity(len);
    let mut weight = vec![0.0f64; n];
    while seq.len() < text_len {
        let chosen = rng.random_bool(0.5);
        seq.push(if chosen { CHOSEN } else { REJECTED });
        let w = if chosen { 1.0 } else { REJECTED_WEIGHT };
        for _ in 0..rng.random_range(1..=MAX_SPAN) {
            if rng.random_bool(MARKER_RATE) {
                seq.push(*inner.choose(rng).unwrap_or(&BOS));
            }
            let i = rng.sample(&pick);
            if seq.len() < text_len {
                weight[i] += w;
            }
            seq.push(items[i]);
        }
    }
    seq.truncate(text_len);
    let mut target = vec![false; seq.len()];
    seq.push(SUM);
    target.push(false);
    for _ in 0..rng.random_range(1..=cap) {
        let Ok(draw) = WeightedIndex::new(&weight) else { break };
        let i = rng.sample(&draw);
        weight[i] = 0.0;
        seq.push(items[i]);
        target.push(true);
    }
    if seq.len() - text_len - 1 < cap {
        seq.push(EOS);
        target.push(true);
    }
    (seq, target)
}

fn training_sequence(pool: &CorpusPool, len: usize, cap: usize, digest_rate: f64, rng: &mut Rng) -> (Vec<Token>, Vec<bool>) {
    if rng.random_bool(digest_rate) {
        digest_sequence(pool, len, cap, rng)
    } else {
        recall_sequence(pool, len, rng)
    }
}

pub fn pretrain(world: &World, model: &ModelConfig, cfg: &PretrainConfig) -> Result<Pretrained, PretrainError> {
    let pool = CorpusPool::new(world);
    if pool.content.len() < 4 {
        return Err(PretrainError::EmptyPool);
    }
    let mut store = ParamStore::new();
    let lm = Summarizer::new(&mut store, model, &mut stream(cfg.seed, &[0x4241]));
    let frozen = lm.trunk.token_embedding();
    let mut adam = AdamState::new(&store, AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    let len = cfg.seq_len.min(model.max_seq);
    for step in 0..cfg.steps {
        let mut total = Gradients::new();
        let mut loss_sum = 0.0;
        let rate = if step < cfg.digest_after { 0.0 } else { cfg.digest_rate };
        for b in 0..cfg.batch_size {
            let mut rng = stream(cfg.seed, &[0x5051, step as u64, b as u64]);
            let (seq, target) = training_sequence(&pool, len + 1, model.summary_cap, rate, &mut rng);
            let mut tape = Tape::new();
            let nll = recall_loss(&lm, &mut tape, &store, &seq, &target)?;
            loss_sum += tape.value(nll).item() as f64;
            total.accumulate(&tape.backward(nll)?);
        }
        total.scale(1.0 / cfg.batch_size as f32);
        total.retain(|id| id != frozen);
        adam.step(&mut store, &total)?;
        let loss = loss_sum / cfg.batch_size as f64;
        if step % 100 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
        losses.push(loss);
    }
    Ok(Pretrained { store, losses })
}

/// Mean next-token loss over the predictable positions of one sequence.
fn recall_loss(lm: &Summarizer, tape: &mut Tape, store: &ParamStore, seq: &[Token], target: &[bool]) -> Result<crate::tape::Var, PretrainError> {
    let len = seq.len() - 1;
    let lp = lm.log_policy(tape, store, &seq[..len], len)?;
    let picked = tape.pick(lp, &seq[1..])?;
    let mask: Vec<f32> = target[1..].iter().map(|&t| f32::from(u8::from(t))).collect();
    let count = mask.iter().sum::<f32>().max(1.0);
    let mask = tape.constant(Tensor::vector(mask));
    let kept = tape.mul(picked, mask)?;
    let nll = tape.sum(kept)?;
    Ok(tape.scale(nll, -1.0 / count)?)
}

/// Held-out recall loss of a pretrained trunk.
pub fn recall_eval(store: &ParamStore, world: &World, model: &ModelConfig, cfg: &PretrainConfig, n: usize, seed: u64) -> Result<f64, PretrainError> {
    let mut scratch = ParamStore::new();
    let lm = Summarizer::new(&mut scratch, model, &mut stream(0, &[]));
    scratch.load_matching(store);
    let pool = CorpusPool::new(world);
    let len = cfg.seq_len.min(model.max_seq);
    let mut total = 0.0;
    for i in 0..n {
        let (seq, target) = training_sequence(&pool, len + 1, model.summary_cap, cfg.digest_rate, &mut stream(seed, &[0x4556, i as u64]));
        let mut tape = Tape::new();
        let nll = recall_loss(&lm, &mut tape, &scratch, &seq, &target)?;
        total += tape.value(nll).item() as f64;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    #[test]
    fn corpus_stays_in_vocabulary() {
        let world = World::new(WorldConfig::pets()).unwrap();
        let pool = CorpusPool::new(&world);
        let (seq, target) = recall_sequence(&pool, 200, &mut stream(1, &[]));
        assert_eq!(seq.len(), 200);
        assert_eq!(target.len(), 200);
        assert!(seq.iter().all(|&t| pool.contains(t) && t != SUM && t < world.vocab.len()));
    }

    #[test]
    fn digest_copies_from_its_text() {
        let world = World::new(WorldConfig::pets()).unwrap();
        let pool = CorpusPool::new(&world);
        for i in 0..20 {
            let (seq, target) = digest_sequence(&pool, 60, 8, &mut stream(i, &[]));
            assert_eq!(seq.len(), target.len());
            let at = seq.iter().position(|&t| t == SUM).unwrap();
            let digest: Vec<Token> = seq[at + 1..].iter().copied().filter(|&t| t != EOS).collect();
            assert!(!digest.is_empty() && digest.len() <= 8);
            assert!(digest.iter().all(|t| seq[..at].contains(t) && pool.content.contains(t)));
            assert!(target[..=at].iter().all(|&x| !x) && target[at + 1..].iter().all(|&x| x));
        }
    }

    #[test]
    fn short_run_lowers_loss_and_keeps_embeddings() {
        let world = World::new(WorldConfig::pets()).unwrap();
        let model = ModelConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff: 32,
            ..ModelConfig::with_vocab(world.vocab.len())
        };
        let cfg = PretrainConfig {
            steps: 120,
            batch_size: 4,
            seq_len: 32,
            lr: 1e-2,
            seed: 2,
            digest_rate: 0.5,
            digest_after: 60,
        };
        let out = pretrain(&world, &model, &cfg).unwrap();
        let head: f64 = out.losses[..20].iter().sum();
        let tail: f64 = out.losses[100..].iter().sum();
        assert!(tail < head, "{head} {tail}");
        let mut fresh = ParamStore::new();
        let lm = Summarizer::new(&mut fresh, &model, &mut stream(2, &[0x4241]));
        let id = lm.trunk.token_embedding();
        assert_eq!(fresh.get(id), out.store.get(id));
    }
}
