use rand::Rng;

use super::{mean_rows, scalar_head, ModelConfig, ModelError, Trunk};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::world::Token;

const MIN_VARIANCE: f32 = 1e-4;

/// Output head of a reward model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardHead {
    /// A single scalar reward.
    Scalar,
    /// Mean and variance of a Gaussian reward.
    Gaussian,
}

/// What the segment is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum RmInput<'a> {
    None,
    /// Tokens placed before the segment.
    Tokens(&'a [Token]),
    /// A `[1, latent_dim]` user vector, projected to one pseudo-token row.
    Latent(Var),
}

#[derive(Debug, Clone, Copy)]
pub struct RmOutput {
    pub mean: Var,
    /// Present for the Gaussian head; always positive.
    pub variance: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct RewardModel {
    pub trunk: Trunk,
    pub head: RewardHead,
    w: ParamId,
    b: ParamId,
    var_w: Option<(ParamId, ParamId)>,
    latent_proj: Option<ParamId>,
}

impl RewardModel {
    /// Registers parameters under `trunk.` and `rm.`; `latent` adds the
    /// pseudo-token projection.
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ModelConfig, head: RewardHead, latent: bool, rng: &mut R) -> Self {
        let trunk = Trunk::new(store, "trunk", config, true, rng);
        let d = config.d_model;
        let w = store.add_normal("rm.w", &[d, 1], 0.02, rng);
        let b = store.add("rm.b", Tensor::vector(vec![0.0]));
        let var_w = (head == RewardHead::Gaussian).then(|| {
            (
                store.add_normal("rm.var_w", &[d, 1], 0.02, rng),
                store.add("rm.var_b", Tensor::vector(vec![0.0])),
            )
        });
        let latent_proj = latent.then(|| store.add_normal("rm.latent_proj", &[config.latent_dim, d], 0.02, rng));
        Self {
            trunk,
            head,
            w,
            b,
            var_w,
            latent_proj,
        }
    }

    /// Scores `segment` under a conditioning input. Final states of the
    /// segment positions are mean-pooled and fed to the head.
    pub fn score(&self, tape: &mut Tape, store: &ParamStore, input: RmInput<'_>, segment: &[Token]) -> Result<RmOutput, ModelError> {
        let (x, start) = match input {
            RmInput::None => (self.checked_embed(tape, store, &[], segment)?, 0),
            RmInput::Tokens(prefix) => (self.checked_embed(tape, store, prefix, segment)?, prefix.len()),
            RmInput::Latent(z) => {
                let proj = self
                    .latent_proj
                    .ok_or_else(|| ModelError::Variant("latent input without a latent projection".into()))?;
                let body = self.checked_embed(tape, store, &[0], segment)?;
                let body = tape.slice_rows(body, 1, segment.len() + 1)?;
                let p = tape.param(store, proj);
                let row = tape.matmul(z, p)?;
                (tape.concat_rows(&[row, body])?, 1)
            }
        };
        let h = self.trunk.run(tape, store, x, true)?;
        let pooled = mean_rows(tape, h, start)?;
        let mean = scalar_head(tape, store, pooled, self.w, self.b)?;
        let variance = match self.var_w {
            Some((vw, vb)) => {
                let raw = scalar_head(tape, store, pooled, vw, vb)?;
                let sp = tape.softplus(raw)?;
                let floor = tape.constant(Tensor::vector(vec![MIN_VARIANCE]));
                Some(tape.add(sp, floor)?)
            }
            None => None,
        };
        Ok(RmOutput { mean, variance })
    }

    fn checked_embed(&self, tape: &mut Tape, store: &ParamStore, prefix: &[Token], segment: &[Token]) -> Result<Var, ModelError> {
        let got = prefix.len() + segment.len();
        if got > self.trunk.config.max_seq || segment.is_empty() {
            return Err(ModelError::TooLong {
                got,
                prefix: prefix.len(),
                body: segment.len(),
                max: self.trunk.config.max_seq,
            });
        }
        let tokens: Vec<Token> = prefix.iter().chain(segment).copied().collect();
        Ok(self.trunk.embed(tape, store, &tokens)?)
    }

    /// Mean reward of a segment without keeping a tape around.
    pub fn reward(&self, store: &ParamStore, prefix: Option<&[Token]>, segment: &[Token]) -> Result<f32, ModelError> {
        let mut tape = Tape::new();
        let input = prefix.map_or(RmInput::None, RmInput::Tokens);
        let out = self.score(&mut tape, store, input, segment)?;
        Ok(tape.value(out.mean).item())
    }
}
