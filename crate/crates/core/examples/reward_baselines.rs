//! Reward-model baselines on the pets world. BTL and DPL cannot beat a coin
//! flip; the oracle prefix makes the task trivial.

use std::path::Path;

use plus_lab::artifacts::load_or_pretrain;
use plus_lab::config::RunConfig;
use plus_lab::models::ModelConfig;
use plus_lab::params::ParamStore;
use plus_lab::reward::{btl_loss_value, evaluate, train_rm, RewardLearner, RmVariant};
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
    println!("btl loss at equal rewards: {:.6} (ln 2 = {:.6})", btl_loss_value(0.0, 0.0), std::f64::consts::LN_2);
    let (cfg, world, model, base) = setup()?;
    let data = make_dataset(&world, 0)?;
    for variant in [RmVariant::Btl, RmVariant::Dpl, RmVariant::Oracle] {
        let mut learner = RewardLearner::new(variant, &model, 0, false);
        learner.init_from(&base);
        train_rm(&mut learner, &world, &data.train, &cfg.rm, None)?;
        for split in [Split::TestSeen, Split::TestOod] {
            let s = evaluate(&learner, &world, data.split(split), None)?;
            println!("{variant} {}: accuracy {:.3}, ties {:.3}", split.as_str(), s.accuracy, s.tie_rate);
        }
    }
    Ok(())
}
