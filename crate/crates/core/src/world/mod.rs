//! Synthetic pluralistic preference worlds.
//!
//! Two world families are supported. In a *topic* world every user prefers
//! responses about one topic (dogs or cats, with rabbits and birds held back
//! for out-of-distribution users). In an *attribute* world responses realize
//! each of K attributes as high or low, and users weight the attributes
//! differently; only pairs on which user types disagree are emitted.
//!
//! Identity of a topic or attribute realization is carried by dedicated
//! tokens surrounded by random filler tokens, so the oracle reward of any
//! segment is exact.

mod dataset;
mod vocab;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    make_dataset, read_jsonl, write_dataset, Counts, Dataset, DatasetRecord, FileEntry, Manifest, Split, sha256_hex,
};
pub use vocab::{
    AttributeTokens, Token, Vocabulary, BOS, CHOSEN, EOS, HINT, MAX_VOCAB, PAD, REJECTED, SEP,
    SPECIALS, SUM,
};

/// Longest segment (BOS … EOS) the renderer may produce.
pub const MAX_SEGMENT_LEN: usize = 48;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("duplicate token name {0:?}")]
    DuplicateToken(String),
    #[error("empty preference pool")]
    EmptyPool,
    #[error("unknown topic token {0}")]
    UnknownTopic(Token),
    #[error("attribute realization has {got} entries, world has {expected}")]
    AttributeArity { got: usize, expected: usize },
    #[error("no pair with unequal oracle reward found in {0} draws")]
    DegeneratePair(usize),
    #[error("segment of length {0} exceeds the {MAX_SEGMENT_LEN}-token limit")]
    SegmentTooLong(usize),
    #[error("out-of-distribution records requested but the world reserves no OOD topics")]
    NoOodTopics,
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldMode {
    Topic,
    Attribute,
}

/// Everything needed to build a vocabulary and generate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub mode: WorldMode,
    /// In-distribution topics (topic mode).
    pub topics: Vec<String>,
    /// Topics reserved for out-of-distribution users.
    pub ood_topics: Vec<String>,
    /// Attribute names (attribute mode); K = `attributes.len()`.
    pub attributes: Vec<String>,
    /// One-hot priorities when true, otherwise Dirichlet(1) weights.
    pub strict: bool,
    pub fillers: usize,
    /// Number of distinct question tokens (attribute mode prompts).
    pub questions: usize,
    pub context_min: usize,
    pub context_max: usize,
    /// Probability of flipping a pair's label.
    pub noise: f64,
    /// Prepend the attribute-name hint block to every context.
    pub hint: bool,
    pub counts: Counts,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::pets()
    }
}

impl WorldConfig {
    /// Dog/cat users with rabbit/bird reserved for OOD evaluation.
    pub fn pets() -> Self {
        Self {
            mode: WorldMode::Topic,
            topics: vec!["dog".into(), "cat".into()],
            ood_topics: vec!["rabbit".into(), "bird".into()],
            attributes: Vec::new(),
            strict: true,
            fillers: 48,
            questions: 0,
            context_min: 2,
            context_max: 4,
            noise: 0.0,
            hint: false,
            counts: Counts {
                train: 2000,
                test_seen: 200,
                test_ood: 200,
                records_per_user: 1,
            },
            seed: 0,
        }
    }

    /// Attribute-priority world with `k` ∈ {2, 4} attributes.
    pub fn ufp(k: usize) -> Self {
        let names = ["helpful", "honest", "truthful", "instruct"];
        Self {
            mode: WorldMode::Attribute,
            topics: Vec::new(),
            ood_topics: Vec::new(),
            attributes: names[..k.min(4)].iter().map(|s| s.to_string()).collect(),
            strict: true,
            fillers: 32,
            questions: 16,
            context_min: 2,
            context_max: 4,
            noise: 0.0,
            hint: false,
            counts: Counts {
                train: 10_000,
                test_seen: 2_000,
                test_ood: 0,
                records_per_user: 1,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::Config(m.to_string()));
        if !(2..=4).contains(&self.context_min) || self.context_max < self.context_min || self.context_max > 4 {
            return bad("context size must satisfy 2 <= context_min <= context_max <= 4");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5)");
        }
        if self.counts.records_per_user == 0 {
            return bad("records_per_user must be at least 1");
        }
        match self.mode {
            WorldMode::Topic if self.topics.is_empty() => Err(WorldError::EmptyPool),
            WorldMode::Topic if self.fillers < 4 => bad("topic worlds need at least 4 filler tokens"),
            WorldMode::Attribute if ![2, 4].contains(&self.attributes.len()) => {
                bad("attribute worlds need K = 2 or K = 4 attributes")
            }
            WorldMode::Attribute if self.fillers < 2 => bad("attribute worlds need at least 2 filler tokens"),
            _ => Ok(()),
        }
    }
}

/// What a user actually prefers. Never shown to models except by the oracle variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    Topic(Token),
    /// Non-negative weights over attributes summing to one.
    Attributes(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub user_id: u64,
    pub preference: Preference,
}

/// Hidden ground truth attached to a rendered segment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic: Option<Token>,
    /// `true` = high realization of attribute k.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attrs: Option<Vec<bool>>,
}

/// `BOS prompt SEP response EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub tokens: Vec<Token>,
    pub annotation: Annotation,
}

/// Chosen (`a`) and rejected (`b`) segments.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub chosen: Segment,
    pub rejected: Segment,
    /// The label was flipped by annotator noise.
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserContext {
    pub pairs: Vec<PreferencePair>,
    /// `HINT` followed by every attribute name.
    pub hint: Option<Vec<Token>>,
}

impl UserContext {
    /// Flattened rendering fed to the summarizer and the ICL reward model:
    /// optional hint block, then `CHOSEN s_A REJECTED s_B` per pair.
    pub fn tokens(&self) -> Vec<Token> {
        let mut out = self.hint.clone().unwrap_or_default();
        for p in &self.pairs {
            out.push(CHOSEN);
            out.extend_from_slice(&p.chosen.tokens);
            out.push(REJECTED);
            out.extend_from_slice(&p.rejected.tokens);
        }
        out
    }
}

/// Which population a user is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    InDistribution,
    OutOfDistribution,
}

/// A world config with its vocabulary.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self, WorldError> {
        config.validate()?;
        let vocab = Vocabulary::build(&config)?;
        Ok(Self { config, vocab })
    }

    pub fn mode(&self) -> WorldMode {
        self.config.mode
    }

    pub fn k(&self) -> usize {
        self.vocab.attributes().len()
    }

    fn topic_pool(&self, pop: Population) -> &[Token] {
        match pop {
            Population::InDistribution => self.vocab.topics(),
            Population::OutOfDistribution => self.vocab.ood_topics(),
        }
    }

    /// Draws a user: uniform topic from the population's pool, or a uniform
    /// one-hot (strict) / Dirichlet(1) priority vector.
    pub fn sample_user<R: Rng>(&self, user_id: u64, pop: Population, rng: &mut R) -> Result<UserSpec, WorldError> {
        let preference = match self.mode() {
            WorldMode::Topic => {
                let pool = self.topic_pool(pop);
                let &t = pool.choose(rng).ok_or(WorldError::EmptyPool)?;
                Preference::Topic(t)
            }
            WorldMode::Attribute => {
                let k = self.k();
                if k == 0 {
                    return Err(WorldError::EmptyPool);
                }
                if self.config.strict {
                    let mut w = vec![0.0; k];
                    w[rng.random_range(0..k)] = 1.0;
                    Preference::Attributes(w)
                } else {
                    let raw: Vec<f64> = (0..k).map(|_| -rng.random_range(f64::MIN_POSITIVE..1.0).ln()).collect();
                    let s: f64 = raw.iter().sum();
                    Preference::Attributes(raw.into_iter().map(|x| x / s).collect())
                }
            }
        };
        Ok(UserSpec { user_id, preference })
    }

    fn fillers<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Token> {
        let pool = self.vocab.fillers();
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }

    /// Topic-mode segment: `BOS talk_about_a_pet SEP topic fillers(2..=4) EOS`.
    pub fn render_topic<R: Rng>(&self, topic: Token, rng: &mut R) -> Result<Segment, WorldError> {
        if !self.vocab.is_topic(topic) {
            return Err(WorldError::UnknownTopic(topic));
        }
        let n = rng.random_range(2..=4);
        let mut tokens = vec![BOS, self.vocab.prompts()[0], SEP, topic];
        tokens.extend(self.fillers(n, rng));
        tokens.push(EOS);
        Ok(Segment {
            tokens,
            annotation: Annotation {
                topic: Some(topic),
                attrs: None,
            },
        })
    }

    /// Attribute-mode segment for question `q`: realization tokens in
    /// shuffled order interleaved with one or two fillers.
    pub fn render_attributes<R: Rng>(&self, q: usize, attrs: &[bool], rng: &mut R) -> Result<Segment, WorldError> {
        let table = self.vocab.attributes();
        if attrs.len() != table.len() {
            return Err(WorldError::AttributeArity {
                got: attrs.len(),
                expected: table.len(),
            });
        }
        let prompts = self.vocab.prompts();
        let mut body: Vec<Token> = attrs
            .iter()
            .zip(table)
            .map(|(&hi, t)| if hi { t.hi } else { t.lo })
            .collect();
        let n = rng.random_range(1..=2);
        body.extend(self.fillers(n, rng));
        body.shuffle(rng);
        let mut tokens = vec![BOS, prompts[q % prompts.len()], SEP];
        tokens.extend(body);
        tokens.push(EOS);
        if tokens.len() > MAX_SEGMENT_LEN {
            return Err(WorldError::SegmentTooLong(tokens.len()));
        }
        Ok(Segment {
            tokens,
            annotation: Annotation {
                topic: None,
                attrs: Some(attrs.to_vec()),
            },
        })
    }

    /// Exact reward of a segment for a user.
    pub fn oracle_reward(&self, user: &UserSpec, s: &Segment) -> f64 {
        match &user.preference {
            Preference::Topic(t) => {
                if s.annotation.topic == Some(*t) {
                    1.0
                } else {
                    0.0
                }
            }
            Preference::Attributes(w) => s
                .annotation
                .attrs
                .as_ref()
                .map_or(0.0, |a| w.iter().zip(a).map(|(wk, &hi)| if hi { *wk } else { 0.0 }).sum()),
        }
    }

    /// True iff some one-hot priority type prefers `a` and another prefers `b`.
    pub fn filter_controversial(a: &[bool], b: &[bool]) -> bool {
        let a_wins = a.iter().zip(b).any(|(&x, &y)| x && !y);
        let b_wins = a.iter().zip(b).any(|(&x, &y)| !x && y);
        a_wins && b_wins
    }

    /// Draws a pair with unequal oracle reward for `user`, ordered so the
    /// preferred segment is `chosen`; with probability `noise` the roles swap.
    pub fn sample_pair<R: Rng>(&self, user: &UserSpec, pop: Population, noise: f64, rng: &mut R) -> Result<PreferencePair, WorldError> {
        const MAX_DRAWS: usize = 100;
        for _ in 0..MAX_DRAWS {
            let (s1, s2) = match self.mode() {
                WorldMode::Topic => {
                    let pool = self.topic_pool(pop);
                    if pool.is_empty() {
                        return Err(WorldError::EmptyPool);
                    }
                    let t1 = pool[rng.random_range(0..pool.len())];
                    let t2 = pool[rng.random_range(0..pool.len())];
                    (self.render_topic(t1, rng)?, self.render_topic(t2, rng)?)
                }
                WorldMode::Attribute => {
                    let k = self.k();
                    let a: Vec<bool> = (0..k).map(|_| rng.random()).collect();
                    let b: Vec<bool> = (0..k).map(|_| rng.random()).collect();
                    if !Self::filter_controversial(&a, &b) {
                        continue;
                    }
                    let q = rng.random_range(0..self.vocab.prompts().len());
                    (self.render_attributes(q, &a, rng)?, self.render_attributes(q, &b, rng)?)
                }
            };
            let (r1, r2) = (self.oracle_reward(user, &s1), self.oracle_reward(user, &s2));
            if r1 == r2 {
                continue;
            }
            let (chosen, rejected) = if r1 > r2 { (s1, s2) } else { (s2, s1) };
            let flipped = noise > 0.0 && rng.random_bool(noise);
            return Ok(if flipped {
                PreferencePair {
                    chosen: rejected,
                    rejected: chosen,
                    flipped,
                }
            } else {
                PreferencePair {
                    chosen,
                    rejected,
                    flipped,
                }
            });
        }
        Err(WorldError::DegeneratePair(MAX_DRAWS))
    }

    pub fn hint_block(&self) -> Vec<Token> {
        let mut h = vec![HINT];
        h.extend(self.vocab.attributes().iter().map(|a| a.name));
        h
    }

    /// Tokens naming a user's true preference: the topic, or the high
    /// realization of every attribute with positive weight, heaviest first.
    pub fn oracle_tokens(&self, user: &UserSpec) -> Vec<Token> {
        match &user.preference {
            Preference::Topic(t) => vec![*t],
            Preference::Attributes(w) => {
                let mut order: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 0.0).collect();
                order.sort_by(|&i, &j| w[j].total_cmp(&w[i]).then(i.cmp(&j)));
                order.into_iter().map(|k| self.vocab.attributes()[k].hi).collect()
            }
        }
    }
}
