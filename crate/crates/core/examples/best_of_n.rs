//! Best-of-N reranking with a summary-conditioned reward model, judged by
//! the oracle against the unconditioned pick. Trains PLUS first (a few
//! minutes).

use std::path::Path;

use plus_lab::artifacts::load_or_pretrain;
use plus_lab::bench::{candidates, personalize_response, win_rate_eval};
use plus_lab::config::RunConfig;
use plus_lab::models::ModelConfig;
use plus_lab::params::ParamStore;
use plus_lab::rng::stream;
use plus_lab::trainer::joint_train;
use plus_lab::world::{make_dataset, Population, World};

/// Default world and model, with the pretrained trunk cached under `target/`.
/// The first run pretrains for a few minutes.
fn setup() -> Result<(RunConfig, World, ModelConfig, ParamStore), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default();
    let world = cfg.build_world()?;
    let model = cfg.model_for(&world);
    let cache = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/plus-lab-cache");
    let base = load_or_pretrain(&cache, &world, &model, &cfg.pretrain)?;
    Ok((cfg, world, model, base))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (cfg, world, model, base) = setup()?;
    let data = make_dataset(&world, 0)?;
    let m = joint_train(&world, &data.train, &data.test_seen, Some(&base), &model, &cfg.joint)?.models;

    for (i, r) in data.test_seen.iter().take(3).enumerate() {
        let cands = candidates(&world, r, Population::InDistribution, cfg.bench.best_of, &mut stream(0, &[i as u64]))?;
        let p = personalize_response(&m.policy, &m.policy_store, &m.rm, &r.context.tokens(), &cands)?;
        println!("user prefers {}, summary {:?}", world.vocab.detokenize(&world.oracle_tokens(&r.user)), world.vocab.detokenize(&p.summary));
        println!("  conditioned   {}", world.vocab.detokenize(&p.conditioned.tokens));
        println!("  unconditioned {}", world.vocab.detokenize(&p.unconditioned.tokens));
    }

    let wr = win_rate_eval(&world, &m, &data.test_seen, Population::InDistribution, cfg.bench.best_of, cfg.bench.win_records, 0)?;
    println!("win rate {:.3} ({} wins, {} ties, {} losses)", wr.rate(), wr.wins, wr.ties, wr.losses);
    Ok(())
}
