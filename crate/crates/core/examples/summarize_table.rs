//! Summarises a per-combination AUC table by test condition, the way the
//! evaluation report does.
//!
//! cargo run --release --example summarize_table -- [combinations.csv]

use std::path::PathBuf;

use axle_crack::traineval::{summarize, CombinationTable};

fn main() -> axle_crack::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/published_combinations.csv")
    });
    let table = CombinationTable::read(&path)?;
    let summary = summarize(&table)?;
    println!("{:<12} {:>16}  {:>13} {:>13} {:>13}", "factor", "value", "WA1", "WA2", "WA3");
    for g in &summary.groups {
        let cell = |i: usize| format!("{:.2} +- {:.2}", g.mean[i], g.std[i]);
        println!("{:<12} {:>16}  {:>13} {:>13} {:>13}", g.factor, g.label, cell(0), cell(1), cell(2));
    }
    let o = summary.overall;
    println!("{:<12} {:>16}  {:>13.2} {:>13.2} {:>13.2}", "overall", "", o[0], o[1], o[2]);
    Ok(())
}
