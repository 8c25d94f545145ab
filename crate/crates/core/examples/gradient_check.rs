//! Runs the gradient-check and oracle suites, as `axle check` does.
//!
//! cargo run --release --example gradient_check -- [seed]

use axle_crack::verify::run_checks;

fn main() -> axle_crack::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let results = run_checks(seed)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} suites, {failed} failed", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
