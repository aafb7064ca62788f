//! Tiny pre-norm transformer networks.
//!
//! All models share one [`Trunk`] layout under the parameter prefix
//! `trunk.`, which lets a pretrained base initialize any of them.

mod checkpoint;
mod critic;
mod encoder;
mod reward;
mod summarizer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::world::Token;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use critic::Critic;
pub use encoder::{ContextEncoder, EncoderOutput};
pub use reward::{RewardHead, RewardModel, RmInput, RmOutput};
pub use summarizer::{decision_input, SampledSummary, Summarizer};
pub(crate) use summarizer::{entropy_row, strip_eos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Longest summary the summarizer may emit.
    pub summary_cap: usize,
    /// Width of the context-encoder latent.
    pub latent_dim: usize,
    /// Token embeddings stay at their random initialization during training.
    pub frozen_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff: 128,
            vocab: 0,
            max_seq: 256,
            summary_cap: 8,
            latent_dim: 16,
            frozen_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab: usize) -> Self {
        Self {
            vocab,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config("d_model must be divisible by heads".into()));
        }
        if self.summary_cap == 0 {
            return Err(ModelError::Config("summary_cap must be at least 1".into()));
        }
        if self.vocab == 0 || self.layers == 0 || self.ff == 0 || self.latent_dim == 0 {
            return Err(ModelError::Config("vocab, layers, ff and latent_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of {got} tokens (prefix {prefix} + body {body}) exceeds max_seq {max}")]
    TooLong {
        got: usize,
        prefix: usize,
        body: usize,
        max: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model variant mismatch: {0}")]
    Variant(String),
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Token and position embeddings, `layers` pre-norm blocks, final layer norm.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub config: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    causal: bool,
}

const INIT_STD: f32 = 0.02;
/// Token codes are unit-variance; the final norm gain starts small so the
/// tied output layer begins close to uniform.
const TOKEN_STD: f32 = 1.0;
const FINAL_GAIN: f32 = 0.02;

impl Trunk {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: &ModelConfig, causal: bool, rng: &mut R) -> Self {
        let (d, ff) = (config.d_model, config.ff);
        let resid_std = INIT_STD / (2.0 * config.layers as f32).sqrt();
        let tok_emb = store.add_normal(format!("{prefix}.tok_emb"), &[config.vocab, d], TOKEN_STD, rng);
        let pos_emb = store.add_normal(format!("{prefix}.pos_emb"), &[config.max_seq, d], INIT_STD / 2.0, rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.h{l}.{s}");
                Block {
                    ln1_g: store.add(n("ln1_g"), Tensor::full(&[d], 1.0)),
                    ln1_b: store.add(n("ln1_b"), Tensor::zeros(&[d])),
                    wq: store.add_normal(n("wq"), &[d, d], INIT_STD, rng),
                    wk: store.add_normal(n("wk"), &[d, d], INIT_STD, rng),
                    wv: store.add_normal(n("wv"), &[d, d], INIT_STD, rng),
                    wo: store.add_normal(n("wo"), &[d, d], resid_std, rng),
                    ln2_g: store.add(n("ln2_g"), Tensor::full(&[d], 1.0)),
                    ln2_b: store.add(n("ln2_b"), Tensor::zeros(&[d])),
                    w1: store.add_normal(n("w1"), &[d, ff], INIT_STD, rng),
                    b1: store.add(n("b1"), Tensor::zeros(&[ff])),
                    w2: store.add_normal(n("w2"), &[ff, d], resid_std, rng),
                    b2: store.add(n("b2"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        Self {
            config: *config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: store.add(format!("{prefix}.lnf_g"), Tensor::full(&[d], FINAL_GAIN)),
            lnf_b: store.add(format!("{prefix}.lnf_b"), Tensor::zeros(&[d])),
            causal,
        }
    }

    /// The token table, shared with the output projection.
    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, tokens: &[Token]) -> Result<Var, TensorError> {
        let table = tape.param(store, self.tok_emb);
        tape.embed(table, tokens)
    }

    /// Runs the blocks over already-embedded rows `x` (`[T, d]`).
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var, positions: bool) -> Result<Var, ModelError> {
        let t = tape.value(x).shape()[0];
        if t > self.config.max_seq {
            return Err(ModelError::TooLong {
                got: t,
                prefix: 0,
                body: t,
                max: self.config.max_seq,
            });
        }
        let mut h = x;
        if positions {
            let pos_table = tape.param(store, self.pos_emb);
            let pos = tape.slice_rows(pos_table, 0, t)?;
            h = tape.add(h, pos)?;
        }
        for b in &self.blocks {
            let p = |tape: &mut Tape, id| tape.param(store, id);
            let a_in = layer_norm(tape, store, h, b.ln1_g, b.ln1_b)?;
            let (wq, wk, wv, wo) = (p(tape, b.wq), p(tape, b.wk), p(tape, b.wv), p(tape, b.wo));
            let q = tape.matmul(a_in, wq)?;
            let k = tape.matmul(a_in, wk)?;
            let v = tape.matmul(a_in, wv)?;
            let att = tape.attention(q, k, v, self.config.heads, self.causal)?;
            let att = tape.matmul(att, wo)?;
            h = tape.add(h, att)?;

            let f_in = layer_norm(tape, store, h, b.ln2_g, b.ln2_b)?;
            let (w1, b1, w2, b2) = (p(tape, b.w1), p(tape, b.b1), p(tape, b.w2), p(tape, b.b2));
            let z = tape.matmul(f_in, w1)?;
            let z = tape.add(z, b1)?;
            let gate = tape.sigmoid(z)?;
            let act = tape.mul(z, gate)?;
            let out = tape.matmul(act, w2)?;
            let out = tape.add(out, b2)?;
            h = tape.add(h, out)?;
        }
        Ok(layer_norm(tape, store, h, self.lnf_g, self.lnf_b)?)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[Token]) -> Result<Var, ModelError> {
        let x = self.embed(tape, store, tokens)?;
        self.run(tape, store, x, true)
    }

    /// Next-token logits from final states using the tied token embedding.
    pub fn lm_logits(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var, TensorError> {
        let table = tape.param(store, self.tok_emb);
        tape.matmul_t(h, table)
    }
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, x: Var, g: ParamId, b: ParamId) -> Result<Var, TensorError> {
    let n = tape.layernorm(x)?;
    let g = tape.param(store, g);
    let b = tape.param(store, b);
    let n = tape.mul(n, g)?;
    tape.add(n, b)
}

/// Mean of rows `start..` of `h` as a `[1, d]` row.
pub(crate) fn mean_rows(tape: &mut Tape, h: Var, start: usize) -> Result<Var, TensorError> {
    let t = tape.value(h).shape()[0];
    let body = tape.slice_rows(h, start, t)?;
    let n = t - start;
    let w = tape.constant(Tensor::full(&[1, n], 1.0 / n as f32));
    tape.matmul(w, body)
}

/// Linear map of a `[1, d]` row to a one-element scalar.
pub(crate) fn scalar_head(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var, TensorError> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    let y = tape.sum(y)?;
    tape.add(y, b)
}
