//! Trains every model variant on the same synthetic corpus and compares
//! their mean test AUC per wheelset.
//!
//! cargo run --release --example compare_baselines -- [scale] [epochs] [seed]

use axle_crack::models::{build_model, ArchConfig, Variant};
use axle_crack::synthgen::{synth_corpus, CorpusSpec, SynthConfig};
use axle_crack::traineval::{evaluate_combinations, prepare, train, DataConfig, EvalReport, TrainConfig};

fn main() -> axle_crack::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scale: f64 = args.first().map_or(0.02, |s| s.parse().expect("scale"));
    let epochs: usize = args.get(1).map_or(5, |s| s.parse().expect("epochs"));
    let seed: u64 = args.get(2).map_or(1, |s| s.parse().expect("seed"));

    let ds = synth_corpus(&CorpusSpec::new(scale, seed), &SynthConfig::default())?;
    let data = prepare(&ds, &DataConfig { seed, ..DataConfig::default() })?;
    let config = TrainConfig {
        max_epochs: epochs,
        patience: epochs,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    };

    println!("{:<14} {:>7} {:>7} {:>7} {:>9}", "model", "WA1", "WA2", "WA3", "WA2+WA3");
    for variant in [Variant::Differential, Variant::NoRef, Variant::Cnn1dLstm, Variant::FeaturesLr] {
        let model = build_model(&ArchConfig::for_variant(variant), seed)?;
        let outcome = train(model, &data, &config)?;
        let report = EvalReport::new(variant.name(), evaluate_combinations(&outcome.model, &data, seed)?)?;
        let o = report.summary.overall;
        println!(
            "{:<14} {:>7.4} {:>7.4} {:>7.4} {:>9.4}",
            variant.name(),
            o[0],
            o[1],
            o[2],
            (o[1] + o[2]) / 2.0
        );
    }
    Ok(())
}
