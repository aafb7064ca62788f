//! A reduced benchmark in memory: three baselines on two seeds. The `bench`
//! command runs every variant and writes the report files.

use std::path::Path;

use plus_lab::artifacts::load_or_pretrain;
use plus_lab::bench::{report_markdown, run_benchmark, BenchmarkSpec, Lab, Variant};
use plus_lab::config::RunConfig;
use plus_lab::models::ModelConfig;
use plus_lab::params::ParamStore;
use plus_lab::world::{make_dataset, World};

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
    let lab = Lab {
        world: &world,
        data: &data,
        base: Some(&base),
        model: &model,
        rm: &cfg.rm,
        joint: &cfg.joint,
        vpl_variational: false,
    };
    let spec = BenchmarkSpec {
        variants: vec![Variant::Btl, Variant::Dpl, Variant::Oracle],
        seeds: vec![0, 1],
        ..BenchmarkSpec::default()
    };
    let out = run_benchmark(&spec, &lab, |_, _| Ok(None), |_, _, _, _| Ok(()))?;
    print!("{}", report_markdown(&out.aggregates));
    Ok(())
}
