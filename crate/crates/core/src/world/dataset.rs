//! Dataset generation and the JSONL record format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Annotation, Population, PreferencePair, Segment, Token, UserContext, UserSpec, World, WorldError, WorldMode, WorldConfig};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub test_seen: usize,
    pub test_ood: usize,
    /// Records sharing one user (and therefore one context).
    pub records_per_user: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestSeen,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestSeen, Split::TestOod];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::TestSeen => "test_seen.jsonl",
            Split::TestOod => "test_ood.jsonl",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test-seen",
            Split::TestOod => "test-ood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test-seen" | "test_seen" => Some(Split::TestSeen),
            "test-ood" | "test_ood" => Some(Split::TestOod),
            _ => None,
        }
    }

    /// User ids of different splits never collide.
    fn user_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::TestSeen => 1_000_000,
            Split::TestOod => 2_000_000,
        }
    }

    fn population(self) -> Population {
        match self {
            Split::TestOod => Population::OutOfDistribution,
            _ => Population::InDistribution,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub user: UserSpec,
    pub split: Split,
    pub context: UserContext,
    pub eval: PreferencePair,
}

impl DatasetRecord {
    pub fn user_id(&self) -> u64 {
        self.user.user_id
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<DatasetRecord>,
    pub test_seen: Vec<DatasetRecord>,
    pub test_ood: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[DatasetRecord] {
        match split {
            Split::Train => &self.train,
            Split::TestSeen => &self.test_seen,
            Split::TestOod => &self.test_ood,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<DatasetRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::TestSeen => &mut self.test_seen,
            Split::TestOod => &mut self.test_ood,
        }
    }
}

fn count_for(c: &Counts, split: Split) -> usize {
    match split {
        Split::Train => c.train,
        Split::TestSeen => c.test_seen,
        Split::TestOod => c.test_ood,
    }
}

/// Generates every split of a world deterministically from `seed`.
///
/// Each user draws from its own random stream keyed by `(seed, split, user)`,
/// so the output does not depend on generation order.
pub fn make_dataset(world: &World, seed: u64) -> Result<Dataset, WorldError> {
    let counts = world.config.counts;
    if counts.test_ood > 0 && world.vocab.ood_topics().is_empty() {
        return Err(WorldError::NoOodTopics);
    }
    let mut ds = Dataset::default();
    for (code, split) in Split::ALL.into_iter().enumerate() {
        let total = count_for(&counts, split);
        let per_user = counts.records_per_user;
        let users = total.div_ceil(per_user);
        let out = ds.split_mut(split);
        for u in 0..users {
            let mut rng = stream(seed, &[code as u64, u as u64]);
            let user_id = split.user_offset() + u as u64;
            let pop = split.population();
            let user = world.sample_user(user_id, pop, &mut rng)?;
            let m = rng.random_range(world.config.context_min..=world.config.context_max);
            let pairs = (0..m)
                .map(|_| world.sample_pair(&user, pop, world.config.noise, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let hint = world.config.hint.then(|| world.hint_block());
            let context = UserContext { pairs, hint };
            let n_records = per_user.min(total - u * per_user);
            for _ in 0..n_records {
                let eval = fresh_eval_pair(world, &user, pop, &context, &mut rng)?;
                out.push(DatasetRecord {
                    user: user.clone(),
                    split,
                    context: context.clone(),
                    eval,
                });
            }
        }
    }
    Ok(ds)
}

fn fresh_eval_pair<R: Rng>(
    world: &World,
    user: &UserSpec,
    pop: Population,
    context: &UserContext,
    rng: &mut R,
) -> Result<PreferencePair, WorldError> {
    let seen = |s: &Segment| {
        context
            .pairs
            .iter()
            .any(|p| p.chosen.tokens == s.tokens || p.rejected.tokens == s.tokens)
    };
    for _ in 0..100 {
        let p = world.sample_pair(user, pop, world.config.noise, rng)?;
        if !seen(&p.chosen) && !seen(&p.rejected) {
            return Ok(p);
        }
    }
    Err(WorldError::DegeneratePair(100))
}

#[derive(Serialize, Deserialize)]
struct PairTokens {
    chosen: Vec<Token>,
    rejected: Vec<Token>,
}

#[derive(Serialize, Deserialize)]
struct PairAnnotation {
    chosen: Annotation,
    rejected: Annotation,
    flipped: bool,
}

#[derive(Serialize, Deserialize)]
struct Annotations {
    user: UserSpec,
    context: Vec<PairAnnotation>,
    eval: PairAnnotation,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    user_id: u64,
    split: Split,
    context: Vec<PairTokens>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hint: Option<Vec<Token>>,
    eval: PairTokens,
    annotations: Annotations,
}

fn pair_tokens(p: &PreferencePair) -> PairTokens {
    PairTokens {
        chosen: p.chosen.tokens.clone(),
        rejected: p.rejected.tokens.clone(),
    }
}

fn pair_annotation(p: &PreferencePair) -> PairAnnotation {
    PairAnnotation {
        chosen: p.chosen.annotation.clone(),
        rejected: p.rejected.annotation.clone(),
        flipped: p.flipped,
    }
}

fn rebuild_pair(t: PairTokens, a: PairAnnotation) -> PreferencePair {
    PreferencePair {
        chosen: Segment {
            tokens: t.chosen,
            annotation: a.chosen,
        },
        rejected: Segment {
            tokens: t.rejected,
            annotation: a.rejected,
        },
        flipped: a.flipped,
    }
}

impl DatasetRecord {
    pub fn to_json_line(&self) -> String {
        let line = RecordLine {
            user_id: self.user.user_id,
            split: self.split,
            context: self.context.pairs.iter().map(pair_tokens).collect(),
            hint: self.context.hint.clone(),
            eval: pair_tokens(&self.eval),
            annotations: Annotations {
                user: self.user.clone(),
                context: self.context.pairs.iter().map(pair_annotation).collect(),
                eval: pair_annotation(&self.eval),
            },
        };
        serde_json::to_string(&line).expect("record serializes")
    }

    pub fn from_json_line(s: &str) -> Result<Self, WorldError> {
        let line: RecordLine = serde_json::from_str(s).map_err(|e| WorldError::Io(e.to_string()))?;
        if line.context.len() != line.annotations.context.len() {
            return Err(WorldError::Io("context annotation count mismatch".into()));
        }
        let pairs = line
            .context
            .into_iter()
            .zip(line.annotations.context)
            .map(|(t, a)| rebuild_pair(t, a))
            .collect();
        Ok(Self {
            user: line.annotations.user,
            split: line.split,
            context: UserContext {
                pairs,
                hint: line.hint,
            },
            eval: rebuild_pair(line.eval, line.annotations.eval),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub vocab_digest: String,
    pub seed: u64,
    pub world: WorldConfig,
    pub controversial_filter: bool,
    pub files: BTreeMap<String, FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `train.jsonl`, `test_seen.jsonl`, `test_ood.jsonl` and `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    world: &World,
    ds: &Dataset,
    seed: u64,
    config_digest: &str,
) -> Result<Manifest, WorldError> {
    let io = |e: std::io::Error| WorldError::Io(e.to_string());
    fs::create_dir_all(dir).map_err(io)?;
    let mut files = BTreeMap::new();
    for split in Split::ALL {
        let mut buf = Vec::new();
        for r in ds.split(split) {
            buf.extend_from_slice(r.to_json_line().as_bytes());
            buf.push(b'\n');
        }
        fs::write(dir.join(split.file_name()), &buf).map_err(io)?;
        files.insert(
            split.file_name().to_string(),
            FileEntry {
                records: ds.split(split).len(),
                sha256: sha256_hex(&buf),
            },
        );
    }
    let manifest = Manifest {
        config_digest: config_digest.to_string(),
        vocab_digest: world.vocab.digest(),
        seed,
        world: world.config.clone(),
        controversial_filter: world.mode() == WorldMode::Attribute,
        files,
    };
    let mut f = fs::File::create(dir.join("manifest.json")).map_err(io)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| WorldError::Io(e.to_string()))?;
    f.write_all(json.as_bytes()).map_err(io)?;
    f.write_all(b"\n").map_err(io)?;
    Ok(manifest)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, WorldError> {
    let f = fs::File::open(path).map_err(|e| WorldError::Io(format!("{}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| WorldError::Io(e.to_string()))?;
            DatasetRecord::from_json_line(&l)
        })
        .collect()
}
