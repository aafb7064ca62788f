//! Builds the pets and four-attribute worlds and prints a few records.

use plus_lab::world::{make_dataset, Split, World, WorldConfig};

fn show(world: &World, seed: u64) -> Result<(), Box<dyn std::error::Error>> {
    let data = make_dataset(world, seed)?;
    for split in Split::ALL {
        println!("{}: {} records", split.as_str(), data.split(split).len());
    }
    for r in data.train.iter().take(2) {
        println!("user {} prefers {:?}", r.user_id(), world.vocab.detokenize(&world.oracle_tokens(&r.user)));
        println!("  context  {}", world.vocab.detokenize(&r.context.tokens()));
        println!("  chosen   {}", world.vocab.detokenize(&r.eval.chosen.tokens));
        println!("  rejected {}", world.vocab.detokenize(&r.eval.rejected.tokens));
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("== pets ==");
    show(&World::new(WorldConfig::pets())?, 0)?;

    let mut ufp = WorldConfig::ufp(4);
    ufp.counts.train = 200;
    ufp.counts.test_seen = 50;
    println!("== four attributes, controversial pairs only ==");
    show(&World::new(ufp)?, 0)
}
