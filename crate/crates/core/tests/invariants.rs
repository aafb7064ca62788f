use std::collections::HashSet;

use plus_lab::bench::{aggregate, ReportRow, Variant, WinRate};
use plus_lab::models::{ModelConfig, Summarizer};
use plus_lab::params::ParamStore;
use plus_lab::reward::{btl_loss_value, btl_prob, RewardLearner, RmVariant};
use plus_lab::rng::stream;
use plus_lab::tape::Tape;
use plus_lab::tensor::Tensor;
use plus_lab::world::{make_dataset, Preference, Split, World, WorldConfig};
use proptest::prelude::*;
use rand::Rng;

fn small(mut cfg: WorldConfig, seed: u64) -> WorldConfig {
    cfg.counts.train = 60;
    cfg.counts.test_seen = 20;
    cfg.counts.test_ood = if cfg.ood_topics.is_empty() { 0 } else { 20 };
    cfg.seed = seed;
    cfg
}

fn tiny_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        ff: 32,
        ..ModelConfig::with_vocab(vocab)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..12, data in prop::collection::vec(-30f32..30.0, 60)) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(rows, cols, data[..rows * cols].to_vec()).unwrap());
        let s = tape.softmax_lastdim(a).unwrap();
        for r in 0..rows {
            let total: f32 = tape.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6, "row {r} sums to {total}");
        }
    }

    #[test]
    fn layernorm_rows_have_zero_mean(rows in 1usize..5, cols in 2usize..12, data in prop::collection::vec(-50f32..50.0, 60)) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(rows, cols, data[..rows * cols].to_vec()).unwrap());
        let y = tape.layernorm(a).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn btl_forms_agree(a in -20f64..20.0, b in -20f64..20.0) {
        let exp_normalized = a.exp() / (a.exp() + b.exp());
        prop_assert!((exp_normalized - btl_prob(a, b)).abs() < 1e-12);
        prop_assert!((-exp_normalized.ln() - btl_loss_value(a, b)).abs() < 1e-9);
    }

    #[test]
    fn btl_is_shift_invariant(a in -10f64..10.0, b in -10f64..10.0, c in -100f64..100.0) {
        prop_assert!((btl_loss_value(a + c, b + c) - btl_loss_value(a, b)).abs() < 1e-6);
        prop_assert_eq!((a + c) > (b + c), a > b);
    }

    #[test]
    fn decisions_survive_positive_rescaling(a in -10f64..10.0, b in -10f64..10.0, c in 1e-3f64..1e3) {
        prop_assert_eq!((c * a).total_cmp(&(c * b)), a.total_cmp(&b));
    }

    #[test]
    fn aggregates_match_recomputation(accs in prop::collection::vec(0f64..=1.0, 1..6)) {
        let rows: Vec<ReportRow> = accs.iter().enumerate().map(|(i, &accuracy)| ReportRow {
            variant: Variant::Plus,
            split: Split::TestSeen,
            seed: i as u64,
            accuracy,
            tie_rate: 0.0,
            n_pairs: 1,
            params_digest: String::new(),
        }).collect();
        let agg = &aggregate(&rows)[0];
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 {
            (accs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        prop_assert!((agg.mean - mean).abs() < 1e-9);
        prop_assert!((agg.std - std).abs() < 1e-9);
        prop_assert_eq!(agg.seeds, accs.len());
    }

    #[test]
    fn win_rate_is_a_fraction(wins in 0usize..50, ties in 0usize..50, losses in 0usize..50) {
        let r = WinRate { wins, ties, losses }.rate();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn noiseless_labels_follow_the_oracle(seed in 0u64..1000, ufp in any::<bool>()) {
        let cfg = small(if ufp { WorldConfig::ufp(4) } else { WorldConfig::pets() }, seed);
        let world = World::new(cfg).unwrap();
        let data = make_dataset(&world, seed).unwrap();
        for split in Split::ALL {
            for r in data.split(split) {
                let pairs = r.context.pairs.iter().chain(std::iter::once(&r.eval));
                for p in pairs {
                    prop_assert!(world.oracle_reward(&r.user, &p.chosen) > world.oracle_reward(&r.user, &p.rejected));
                }
            }
        }
    }

    #[test]
    fn attribute_pairs_are_controversial(seed in 0u64..1000, k in prop::sample::select(vec![2usize, 4])) {
        let world = World::new(small(WorldConfig::ufp(k), seed)).unwrap();
        let data = make_dataset(&world, seed).unwrap();
        for r in data.train.iter().chain(&data.test_seen) {
            let a = r.eval.chosen.annotation.attrs.as_ref().unwrap();
            let b = r.eval.rejected.annotation.attrs.as_ref().unwrap();
            // Some one-hot priority prefers each side.
            let prefers_a = (0..k).any(|j| a[j] && !b[j]);
            let prefers_b = (0..k).any(|j| b[j] && !a[j]);
            prop_assert!(prefers_a && prefers_b);
        }
    }

    #[test]
    fn splits_stay_hygienic(seed in 0u64..1000) {
        let world = World::new(small(WorldConfig::pets(), seed)).unwrap();
        let data = make_dataset(&world, seed).unwrap();
        let ood: HashSet<_> = world.vocab.ood_topics().iter().copied().collect();
        for r in &data.train {
            prop_assert!(r.context.tokens().iter().chain(&r.eval.chosen.tokens).chain(&r.eval.rejected.tokens).all(|t| !ood.contains(t)));
        }
        for r in data.train.iter().chain(&data.test_seen).chain(&data.test_ood) {
            for p in &r.context.pairs {
                for s in [&p.chosen, &p.rejected] {
                    prop_assert!(s.tokens != r.eval.chosen.tokens && s.tokens != r.eval.rejected.tokens);
                }
            }
        }
        for r in &data.test_ood {
            prop_assert!(matches!(r.user.preference, Preference::Topic(t) if ood.contains(&t)));
        }
    }

    #[test]
    fn model_outputs_are_finite(seed in 0u64..10_000, len in 1usize..40, prefix_len in 0usize..6) {
        let world = World::new(WorldConfig::pets()).unwrap();
        let cfg = tiny_model(world.vocab.len());
        let mut rng = stream(seed, &[]);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..world.vocab.len())).collect();
        let prefix: Vec<usize> = (0..prefix_len).map(|_| rng.random_range(0..world.vocab.len())).collect();
        for variant in [RmVariant::Btl, RmVariant::Dpl, RmVariant::Summary] {
            let l = RewardLearner::new(variant, &cfg, seed, false);
            let r = l.model.reward(&l.store, Some(&prefix), &tokens).unwrap();
            prop_assert!(r.is_finite());
        }
        let mut store = ParamStore::new();
        let pi = Summarizer::new(&mut store, &cfg, &mut stream(seed, &[1]));
        let z = pi.sample(&store, &tokens, 1.0, &mut rng).unwrap();
        prop_assert!(z.logprobs.iter().all(|p| p.is_finite() && *p <= 0.0));
        prop_assert!(z.content().len() <= cfg.summary_cap);
    }
}

#[test]
fn population_is_balanced() {
    // Pooled over twenty datasets, within two binomial standard deviations of
    // an even split. A single dataset leaves the band one time in twenty.
    let world = World::new(WorldConfig::pets()).unwrap();
    let dog = world.vocab.id("dog").unwrap();
    let (mut n, mut dogs) = (0.0, 0.0);
    for seed in 0..20 {
        let data = make_dataset(&world, seed).unwrap();
        n += data.train.len() as f64;
        dogs += data.train.iter().filter(|r| r.user.preference == Preference::Topic(dog)).count() as f64;
    }
    assert!((dogs - n / 2.0).abs() <= 2.0 * (n * 0.25).sqrt(), "{dogs} of {n}");
}
