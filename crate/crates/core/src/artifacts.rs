//! On-disk layout of datasets, trained variants and the pretrained base.
//!
//! Every checkpoint is stamped with `config_digest:vocab_digest`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{Trained, TrainLog, Variant};
use crate::models::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointError, ModelConfig, Summarizer};
use crate::params::ParamStore;
use crate::pretrain::{pretrain, PretrainConfig, PretrainError};
use crate::reward::{metrics_csv, RewardLearner};
use crate::rng::stream;
use crate::trainer::{curves_csv, Models};
use crate::world::{read_jsonl, sha256_hex, Dataset, Manifest, Split, World, WorldError};

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("i/o on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("{what}: digest {found} does not match {expected}")]
    Digest { what: String, expected: String, found: String },
    #[error("malformed {path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ArtifactError + '_ {
    move |e| ArtifactError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ArtifactError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Provenance stamp of checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config: String,
    pub vocab: String,
}

impl Stamp {
    pub fn new(config: &str, world: &World) -> Self {
        Self {
            config: config.to_string(),
            vocab: world.vocab.digest(),
        }
    }

    pub fn render(&self) -> String {
        format!("{}:{}", self.config, self.vocab)
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (config, vocab) = s.split_once(':')?;
        Some(Self {
            config: config.to_string(),
            vocab: vocab.to_string(),
        })
    }
}

/// Reads a dataset directory, checking every file against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset), ArtifactError> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ArtifactError::Format {
        path: mpath.display().to_string(),
        message: e.to_string(),
    })?;
    let mut data = Dataset::default();
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if let Some(entry) = manifest.files.get(split.file_name()) {
            let found = sha256_hex(&bytes);
            if found != entry.sha256 {
                return Err(ArtifactError::Digest {
                    what: path.display().to_string(),
                    expected: entry.sha256.clone(),
                    found,
                });
            }
        }
        let records = read_jsonl(&path)?;
        match split {
            Split::Train => data.train = records,
            Split::TestSeen => data.test_seen = records,
            Split::TestOod => data.test_ood = records,
        }
    }
    Ok((manifest, data))
}

/// `root/<variant>/seed-<seed>`.
pub fn run_dir(root: &Path, variant: Variant, seed: u64) -> PathBuf {
    root.join(variant.as_str()).join(format!("seed-{seed}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub variant: Variant,
    pub seed: u64,
    pub config_digest: String,
    pub vocab_digest: String,
    pub halted: Option<usize>,
    /// Parameter file name to its SHA-256.
    pub files: Vec<(String, String)>,
}

/// Writes the checkpoints, curves and `meta.json` of one trained run.
pub fn save_trained(dir: &Path, stamp: &Stamp, variant: Variant, seed: u64, trained: &Trained, log: &TrainLog) -> Result<RunMeta, ArtifactError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    for (name, store) in trained.stores() {
        let path = dir.join(format!("{name}.ckpt"));
        save_checkpoint(&path, &stamp.render(), store)?;
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        files.push((format!("{name}.ckpt"), sha256_hex(&bytes)));
    }
    match trained {
        Trained::Joint(_) => write_file(&dir.join("curves.csv"), curves_csv(&log.curves))?,
        Trained::Reward(l) => write_file(&dir.join("metrics.csv"), metrics_csv(l.variant, "train", seed, &log.epochs))?,
    }
    let meta = RunMeta {
        variant,
        seed,
        config_digest: stamp.config.clone(),
        vocab_digest: stamp.vocab.clone(),
        halted: log.halted,
        files,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_file(&dir.join("meta.json"), json + "\n")?;
    Ok(meta)
}

/// Loads a run saved by [`save_trained`], or `None` when the directory
/// holds no run. A run stamped with another config is an error.
pub fn load_trained(dir: &Path, stamp: &Stamp, model: &ModelConfig, variant: Variant, seed: u64, vpl_variational: bool) -> Result<Option<Trained>, ArtifactError> {
    if !dir.join("meta.json").exists() {
        return Ok(None);
    }
    let expected = stamp.render();
    let load = |name: &str, store: &mut ParamStore| -> Result<(), ArtifactError> {
        load_checkpoint(&dir.join(format!("{name}.ckpt")), store, Some(&expected)).map_err(|e| match e {
            CheckpointError::Digest { expected, found } => ArtifactError::Digest {
                what: dir.join(format!("{name}.ckpt")).display().to_string(),
                expected,
                found,
            },
            e => e.into(),
        })?;
        Ok(())
    };
    Ok(Some(match variant.reward_variant() {
        Some(rv) => {
            let mut l = RewardLearner::new(rv, model, seed, vpl_variational);
            load("rm", &mut l.store)?;
            Trained::Reward(l)
        }
        None => {
            let mut m = Models::new(model, None, seed);
            load("pi", &mut m.policy_store)?;
            load("rm", &mut m.rm.store)?;
            load("critic", &mut m.critic_store)?;
            m.reference = m.policy_store.clone();
            Trained::Joint(m)
        }
    }))
}

/// A policy checkpoint for summarizing; its vocabulary digest must match.
pub fn load_policy(path: &Path, model: &ModelConfig, vocab_digest: &str) -> Result<(Summarizer, ParamStore), ArtifactError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let ckpt = read_checkpoint(&bytes)?;
    let found = Stamp::parse(&ckpt.digest).map(|s| s.vocab).unwrap_or_default();
    if found != vocab_digest {
        return Err(ArtifactError::Digest {
            what: path.display().to_string(),
            expected: vocab_digest.to_string(),
            found,
        });
    }
    let mut store = ParamStore::new();
    let policy = Summarizer::new(&mut store, model, &mut stream(0, &[0x5049]));
    load_checkpoint(path, &mut store, None)?;
    Ok((policy, store))
}

/// Identity of a pretrained base: model shape, pretraining settings and vocabulary.
pub fn base_digest(world: &World, model: &ModelConfig, cfg: &PretrainConfig) -> String {
    let text = serde_json::to_string(&(model, cfg, world.vocab.digest())).expect("serializes");
    sha256_hex(text.as_bytes())
}

/// The pretrained base from `cache`, pretraining and saving it on a miss.
pub fn load_or_pretrain(cache: &Path, world: &World, model: &ModelConfig, cfg: &PretrainConfig) -> Result<ParamStore, ArtifactError> {
    let digest = base_digest(world, model, cfg);
    let path = cache.join(format!("base-{}.ckpt", &digest[..16]));
    let mut store = ParamStore::new();
    let _ = Summarizer::new(&mut store, model, &mut stream(cfg.seed, &[0x4241]));
    if path.exists() {
        load_checkpoint(&path, &mut store, Some(&digest))?;
        return Ok(store);
    }
    log::info!("pretraining base into {}", path.display());
    let out = pretrain(world, model, cfg)?;
    fs::create_dir_all(cache).map_err(io_err(cache))?;
    save_checkpoint(&path, &digest, &out.store)?;
    Ok(out.store)
}
