use rand::Rng;

use super::{ModelConfig, ModelError, Trunk};
use crate::params::ParamStore;
use crate::tape::{log_sum_exp, Tape, Var};
use crate::world::{Token, EOS, SUM};

/// Autoregressive summary policy: reads `context SUM` and emits up to
/// `summary_cap` tokens, stopping early on `EOS`.
#[derive(Debug, Clone)]
pub struct Summarizer {
    pub trunk: Trunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSummary {
    /// Emitted tokens, including a final `EOS` if one was sampled.
    pub tokens: Vec<Token>,
    /// Log-probability of each emitted token under the untempered policy.
    pub logprobs: Vec<f32>,
}

impl SampledSummary {
    /// Tokens without the trailing `EOS`, as placed in a reward-model prefix.
    pub fn content(&self) -> &[Token] {
        strip_eos(&self.tokens)
    }
}

pub(crate) fn strip_eos(z: &[Token]) -> &[Token] {
    match z.last() {
        Some(&EOS) => &z[..z.len() - 1],
        _ => z,
    }
}

/// `context SUM z[..T-1]`: the input whose last `T` rows predict `z`.
pub fn decision_input(context: &[Token], z: &[Token]) -> Vec<Token> {
    let mut input = Vec::with_capacity(context.len() + z.len() + 1);
    input.extend_from_slice(context);
    input.push(SUM);
    input.extend_from_slice(&z[..z.len().saturating_sub(1)]);
    input
}

impl Summarizer {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        Self {
            trunk: Trunk::new(store, "trunk", config, true, rng),
        }
    }

    fn check_len(&self, context: &[Token]) -> Result<(), ModelError> {
        let cfg = &self.trunk.config;
        let got = context.len() + cfg.summary_cap;
        if got > cfg.max_seq {
            return Err(ModelError::TooLong {
                got,
                prefix: context.len(),
                body: cfg.summary_cap,
                max: cfg.max_seq,
            });
        }
        Ok(())
    }

    /// Log-softmax over the vocabulary for the last `rows` positions of `input`.
    pub fn log_policy(&self, tape: &mut Tape, store: &ParamStore, input: &[Token], rows: usize) -> Result<Var, ModelError> {
        let h = self.trunk.forward(tape, store, input)?;
        let h = tape.slice_rows(h, input.len() - rows, input.len())?;
        let logits = self.trunk.lm_logits(tape, store, h)?;
        Ok(tape.log_softmax_lastdim(logits)?)
    }

    /// Samples a summary. Temperature 0 takes the argmax at every step.
    pub fn sample<R: Rng>(&self, store: &ParamStore, context: &[Token], temperature: f32, rng: &mut R) -> Result<SampledSummary, ModelError> {
        self.check_len(context)?;
        let mut input = context.to_vec();
        input.push(SUM);
        let mut out = SampledSummary {
            tokens: Vec::new(),
            logprobs: Vec::new(),
        };
        for _ in 0..self.trunk.config.summary_cap {
            let mut tape = Tape::new();
            let lp = self.log_policy(&mut tape, store, &input, 1)?;
            let row = tape.value(lp).data();
            let tok = if temperature <= 0.0 {
                argmax(row)
            } else {
                sample_tempered(row, temperature, rng)
            };
            out.tokens.push(tok);
            out.logprobs.push(row[tok]);
            if tok == EOS {
                break;
            }
            input.push(tok);
        }
        Ok(out)
    }

    /// Per-token log-probability of `z` under `store`, and the full
    /// KL(π ‖ π_ref) of the next-token distributions at each step.
    pub fn logprobs_and_kl(
        &self,
        store: &ParamStore,
        ref_store: &ParamStore,
        context: &[Token],
        z: &[Token],
    ) -> Result<(Vec<f32>, Vec<f32>), ModelError> {
        if z.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        self.check_len(context)?;
        let input = decision_input(context, z);
        let mut tape = Tape::new();
        let lp = self.log_policy(&mut tape, store, &input, z.len())?;
        let lp = tape.value(lp).clone();
        let mut ref_tape = Tape::new();
        let lq = self.log_policy(&mut ref_tape, ref_store, &input, z.len())?;
        let lq = ref_tape.value(lq);
        let v = lp.last_dim();
        let logprobs = z.iter().enumerate().map(|(t, &tok)| lp.data()[t * v + tok]).collect();
        let kl = (0..z.len()).map(|t| kl_row(lp.row(t), lq.row(t))).collect();
        Ok((logprobs, kl))
    }
}

/// KL between two rows of log-probabilities, clamped at zero against rounding.
pub(crate) fn kl_row(lp: &[f32], lq: &[f32]) -> f32 {
    let kl: f64 = lp
        .iter()
        .zip(lq)
        .map(|(&a, &b)| (a as f64).exp() * (a as f64 - b as f64))
        .sum();
    kl.max(0.0) as f32
}

/// Entropy of a row of log-probabilities.
pub(crate) fn entropy_row(lp: &[f32]) -> f64 {
    -lp.iter().map(|&a| (a as f64).exp() * a as f64).sum::<f64>()
}

fn argmax(row: &[f32]) -> Token {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn sample_tempered<R: Rng>(row: &[f32], temperature: f32, rng: &mut R) -> Token {
    let scaled: Vec<f32> = row.iter().map(|&x| x / temperature).collect();
    let lse = log_sum_exp(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in scaled.iter().enumerate() {
        acc += (x as f64 - lse).exp();
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn policy() -> (ParamStore, Summarizer) {
        let mut store = ParamStore::new();
        let mut cfg = ModelConfig::with_vocab(30);
        cfg.max_seq = 64;
        let pi = Summarizer::new(&mut store, &cfg, &mut stream(9, &[]));
        (store, pi)
    }

    const CTX: [Token; 10] = [4, 1, 9, 3, 12, 2, 5, 1, 9, 2];

    #[test]
    fn greedy_is_repeatable_and_capped() {
        let (store, pi) = policy();
        let a = pi.sample(&store, &CTX, 0.0, &mut stream(1, &[])).unwrap();
        let b = pi.sample(&store, &CTX, 0.0, &mut stream(2, &[])).unwrap();
        assert_eq!(a, b);
        assert!(!a.tokens.is_empty() && a.tokens.len() <= 8);
    }

    #[test]
    fn sampled_logprobs_match_teacher_forcing() {
        let (store, pi) = policy();
        let mut rng = stream(4, &[]);
        for _ in 0..5 {
            let s = pi.sample(&store, &CTX, 1.0, &mut rng).unwrap();
            let (lp, kl) = pi.logprobs_and_kl(&store, &store, &CTX, &s.tokens).unwrap();
            let total: f32 = s.logprobs.iter().sum();
            let forced: f32 = lp.iter().sum();
            assert!((total - forced).abs() < 1e-4, "{total} vs {forced}");
            assert!(kl.iter().all(|&k| k == 0.0));
        }
    }

    #[test]
    fn kl_is_nonnegative_after_perturbation() {
        let (store, pi) = policy();
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            for (i, x) in other.get_mut(id).data_mut().iter_mut().enumerate() {
                *x += 0.05 * ((i % 7) as f32 - 3.0);
            }
        }
        let z = [12, 13, 2];
        let (_, kl) = pi.logprobs_and_kl(&other, &store, &CTX, &z).unwrap();
        assert!(kl.iter().all(|&k| k >= 0.0));
        assert!(kl.iter().any(|&k| k > 0.0));
    }

    #[test]
    fn decision_input_layout() {
        assert_eq!(decision_input(&[4, 9], &[12, 13, 2]), vec![4, 9, SUM, 12, 13]);
        assert_eq!(strip_eos(&[12, 2]), &[12]);
        assert_eq!(strip_eos(&[12, 13]), &[12, 13]);
    }
}
