//! Finite-difference check of every model head.
//!
//! cargo run --release --example gradient_check -- 100

use plus_lab::gradcheck::{suite, Head};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let checks = suite(n, 0)?;
    for head in Head::ALL {
        let worst = checks
            .iter()
            .filter(|c| c.head == head)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max);
        println!("{head:?}: worst relative error {worst:.2e}");
    }
    let worst = checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    println!("{} instances, worst {:?}", checks.len(), worst);
    Ok(())
}
