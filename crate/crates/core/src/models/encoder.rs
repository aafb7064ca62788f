use rand::Rng;
use rand_distr::StandardNormal;

use super::{mean_rows, ModelConfig, ModelError, Trunk};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::world::Token;

/// Bidirectional encoder mapping a whole user context to one latent vector.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub trunk: Trunk,
    mu: (ParamId, ParamId),
    /// Log-variance head, present in variational mode.
    log_var: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[1, latent_dim]`.
    pub latent: Var,
    /// KL to a standard normal, variational mode only.
    pub kl: Option<Var>,
}

impl ContextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ModelConfig, variational: bool, rng: &mut R) -> Self {
        let trunk = Trunk::new(store, "encoder", config, false, rng);
        let (d, l) = (config.d_model, config.latent_dim);
        let mu = (
            store.add_normal("encoder.mu_w", &[d, l], (1.0 / d as f32).sqrt(), rng),
            store.add("encoder.mu_b", Tensor::zeros(&[l])),
        );
        let log_var = variational.then(|| {
            (
                store.add_normal("encoder.lv_w", &[d, l], 0.02, rng),
                store.add("encoder.lv_b", Tensor::full(&[l], -2.0)),
            )
        });
        Self { trunk, mu, log_var }
    }

    pub fn is_variational(&self) -> bool {
        self.log_var.is_some()
    }

    /// Mean-pools the encoder states and projects to the latent. With a
    /// noise source in variational mode the latent is a reparameterized
    /// sample; otherwise it is the mean.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        context: &[Token],
        positions: bool,
        noise: Option<&mut R>,
    ) -> Result<EncoderOutput, ModelError> {
        if context.is_empty() || context.len() > self.trunk.config.max_seq {
            return Err(ModelError::TooLong {
                got: context.len(),
                prefix: 0,
                body: context.len(),
                max: self.trunk.config.max_seq,
            });
        }
        let x = self.trunk.embed(tape, store, context)?;
        let h = self.trunk.run(tape, store, x, positions)?;
        let pooled = mean_rows(tape, h, 0)?;
        let mu = affine(tape, store, pooled, self.mu)?;
        let Some(lv) = self.log_var else {
            return Ok(EncoderOutput { latent: mu, kl: None });
        };
        let log_var = affine(tape, store, pooled, lv)?;
        // KL(N(mu, σ²) || N(0, 1)) = ½ Σ (σ² + mu² − 1 − ln σ²)
        let var = tape.exp(log_var)?;
        let mu_sq = tape.mul(mu, mu)?;
        let s = tape.add(var, mu_sq)?;
        let s = tape.sub(s, log_var)?;
        let s = tape.sum(s)?;
        let l = self.trunk.config.latent_dim as f32;
        let s = tape.scale(s, 0.5)?;
        let offset = tape.constant(Tensor::vector(vec![-0.5 * l]));
        let kl = tape.add(s, offset)?;
        let latent = match noise {
            Some(rng) => {
                let eps: Vec<f32> = (0..self.trunk.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                let eps = tape.constant(Tensor::new(vec![1, eps.len()], eps)?);
                let half = tape.scale(log_var, 0.5)?;
                let std = tape.exp(half)?;
                let jitter = tape.mul(std, eps)?;
                tape.add(mu, jitter)?
            }
            None => mu,
        };
        Ok(EncoderOutput { latent, kl: Some(kl) })
    }

    /// Deterministic latent as plain numbers.
    pub fn embed_context(&self, store: &ParamStore, context: &[Token]) -> Result<Vec<f32>, ModelError> {
        let mut tape = Tape::new();
        let out = self.encode::<crate::rng::Rng>(&mut tape, store, context, true, None)?;
        Ok(tape.value(out.latent).data().to_vec())
    }
}

fn affine(tape: &mut Tape, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var, ModelError> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn encoder(variational: bool) -> (ParamStore, ContextEncoder) {
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, &ModelConfig::with_vocab(40), variational, &mut stream(5, &[]));
        (store, enc)
    }

    #[test]
    fn latent_is_deterministic_with_configured_width() {
        let (store, enc) = encoder(false);
        let ctx = [4, 1, 9, 3, 12, 2, 5, 1, 9, 3, 13, 2];
        let a = enc.embed_context(&store, &ctx).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, enc.embed_context(&store, &ctx).unwrap());
    }

    #[test]
    fn pair_order_matters_only_through_positions() {
        let (store, enc) = encoder(false);
        let p1 = [4, 1, 9, 3, 12, 2, 5, 1, 9, 3, 13, 2];
        let p2 = [4, 1, 9, 3, 14, 21, 2, 5, 1, 9, 3, 15, 2];
        let ab: Vec<usize> = p1.iter().chain(&p2).copied().collect();
        let ba: Vec<usize> = p2.iter().chain(&p1).copied().collect();
        let run = |ctx: &[usize], positions: bool| {
            let mut tape = Tape::new();
            let out = enc.encode::<crate::rng::Rng>(&mut tape, &store, ctx, positions, None).unwrap();
            tape.value(out.latent).data().to_vec()
        };
        assert_ne!(run(&ab, true), run(&ba, true));
        let (x, y) = (run(&ab, false), run(&ba, false));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn variational_mode_reports_nonnegative_kl() {
        let (store, enc) = encoder(true);
        let mut tape = Tape::new();
        let mut rng = stream(1, &[]);
        let out = enc.encode(&mut tape, &store, &[4, 1, 9, 2], true, Some(&mut rng)).unwrap();
        assert!(tape.value(out.kl.unwrap()).item() >= 0.0);
    }
}
