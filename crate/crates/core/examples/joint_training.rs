//! Joint training of the summarizer and the summary-conditioned reward model
//! on the pets world. One epoch by default; pass `full` for the default three.

use std::path::Path;

use plus_lab::artifacts::load_or_pretrain;
use plus_lab::config::RunConfig;
use plus_lab::models::ModelConfig;
use plus_lab::params::ParamStore;
use plus_lab::reward::evaluate;
use plus_lab::trainer::{greedy_summaries, joint_train};
use plus_lab::world::{make_dataset, Split, World};

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
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (cfg, world, model, base) = setup()?;
    let data = make_dataset(&world, 0)?;
    let mut joint = cfg.joint;
    if std::env::args().nth(1).as_deref() != Some("full") {
        joint.epochs = 1;
    }
    let out = joint_train(&world, &data.train, &data.test_seen, Some(&base), &model, &joint)?;
    let n = out.curves.len();
    for c in out.curves.iter().step_by((n / 10).max(1)) {
        println!("iteration {:4}: reward {:.4} kl {:.5}", c.iteration, c.mean_reward, c.mean_kl);
    }
    for split in [Split::TestSeen, Split::TestOod] {
        let records = data.split(split);
        let book = greedy_summaries(&out.models, records)?;
        let s = evaluate(&out.models.rm, &world, records, Some(&book))?;
        println!("{}: accuracy {:.3}", split.as_str(), s.accuracy);
        for r in records.iter().take(3) {
            println!(
                "  prefers {:6} summary {:?}",
                world.vocab.detokenize(&world.oracle_tokens(&r.user)),
                world.vocab.detokenize(&book[&r.user_id()])
            );
        }
    }
    Ok(())
}
