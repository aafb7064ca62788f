//! Preference losses and reward-model training for every baseline variant.

mod learner;
mod loss;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adam::AdamError;
use crate::models::ModelError;
use crate::tensor::TensorError;
use crate::world::Token;

pub use learner::{
    evaluate, metrics_csv, summary_prefix, train_rm, Condition, EpochMetrics, EvalStats, PairOutcome, Relabeling, RewardLearner,
};
pub use loss::{btl_loss, btl_loss_value, btl_prob, dpl_loss, dpl_loss_value};

/// Greedy summary content per user id.
pub type SummaryBook = BTreeMap<u64, Vec<Token>>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error("variance must be positive, got {0}")]
    Variance(f64),
    #[error("variant {0} needs summaries but none were supplied")]
    NeedsSummaries(RmVariant),
    #[error("no summary for users {0:?}")]
    MissingSummaries(Vec<u64>),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Reward-model baselines, each with exactly one conditioning source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmVariant {
    /// No conditioning.
    Btl,
    /// No conditioning, Gaussian reward.
    Dpl,
    /// Raw context tokens as a prefix.
    Icl,
    /// Learned context latent as a pseudo-token.
    Vpl,
    /// Summary tokens as a prefix.
    Summary,
    /// The user's true preference tokens as a prefix.
    Oracle,
}

impl RmVariant {
    pub const ALL: [RmVariant; 6] = [
        RmVariant::Btl,
        RmVariant::Dpl,
        RmVariant::Icl,
        RmVariant::Vpl,
        RmVariant::Summary,
        RmVariant::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RmVariant::Btl => "btl",
            RmVariant::Dpl => "dpl",
            RmVariant::Icl => "icl",
            RmVariant::Vpl => "vpl",
            RmVariant::Summary => "summary",
            RmVariant::Oracle => "oracle",
        }
    }
}

impl fmt::Display for RmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RmVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown reward variant {s:?}"))
    }
}

/// Supervised reward-model training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate of the full fine-tuning phase.
    pub lr: f32,
    pub batch_size: usize,
    /// Epochs of full fine-tuning, token embeddings excepted.
    pub epochs: usize,
    /// Epochs that train only the reward head and final norm first.
    pub probe_epochs: usize,
    pub probe_lr: f32,
    pub seed: u64,
    /// Weight of the latent KL term in variational VPL mode.
    pub kl_weight: f32,
    /// Fraction of training pairs shown under a random consistent relabeling
    /// of non-structural tokens.
    pub relabel_rate: f64,
    /// Learning rate used at LLM scale, kept for provenance only.
    pub reference_lr: f32,
    /// Batch size used at LLM scale, kept for provenance only.
    pub reference_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 64,
            epochs: 6,
            probe_epochs: 10,
            probe_lr: 3e-3,
            seed: 0,
            kl_weight: 1e-3,
            relabel_rate: 1.0,
            reference_lr: 9e-6,
            reference_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if [self.lr, self.probe_lr].iter().any(|lr| lr.is_nan() || *lr < 0.0) {
            return Err(RewardError::Config(format!(
                "learning rates must be non-negative, got {} and {}",
                self.lr, self.probe_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.relabel_rate) {
            return Err(RewardError::Config(format!("relabel_rate must lie in [0, 1], got {}", self.relabel_rate)));
        }
        if self.batch_size == 0 {
            return Err(RewardError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}
