use rand::Rng;

use super::{ModelConfig, ModelError, Trunk};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::world::Token;

use super::summarizer::decision_input;

/// Value network over the same input layout as the summarizer, with its
/// own parameters.
#[derive(Debug, Clone)]
pub struct Critic {
    pub trunk: Trunk,
    w: ParamId,
    b: ParamId,
}

impl Critic {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        let trunk = Trunk::new(store, "trunk", config, true, rng);
        let w = store.add_normal("critic.w", &[config.d_model, 1], 0.02, rng);
        let b = store.add("critic.b", Tensor::vector(vec![0.0]));
        Self { trunk, w, b }
    }

    /// `[T, 1]` values, one per decision position of `z`.
    pub fn values_var(&self, tape: &mut Tape, store: &ParamStore, context: &[Token], z: &[Token]) -> Result<Var, ModelError> {
        let input = decision_input(context, z);
        let h = self.trunk.forward(tape, store, &input)?;
        let h = tape.slice_rows(h, input.len() - z.len(), input.len())?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let v = tape.matmul(h, w)?;
        Ok(tape.add(v, b)?)
    }

    pub fn values(&self, store: &ParamStore, context: &[Token], z: &[Token]) -> Result<Vec<f32>, ModelError> {
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let v = self.values_var(&mut tape, store, context, z)?;
        Ok(tape.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn fresh_values_are_small_and_repeatable() {
        let mut store = ParamStore::new();
        let critic = Critic::new(&mut store, &ModelConfig::with_vocab(30), &mut stream(2, &[]));
        let ctx = [4, 1, 9, 3, 12, 2];
        let z = [12, 13, 2];
        let v = critic.values(&store, &ctx, &z).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|x| x.abs() < 1.0));
        assert_eq!(v, critic.values(&store, &ctx, &z).unwrap());
    }
}
