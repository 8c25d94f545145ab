//! Trains the reference-conditioned model on a small synthetic corpus, saves
//! a checkpoint and prints the per-wheelset evaluation summary.
//!
//! cargo run --release --example train_differential -- [scale] [epochs] [seed]

use axle_crack::models::{build_model, load_checkpoint, save_checkpoint, ArchConfig, Variant};
use axle_crack::synthgen::{synth_corpus, CorpusSpec, SynthConfig};
use axle_crack::traineval::{emit_report, evaluate_combinations, prepare, train, DataConfig, EvalReport, TrainConfig};

fn main() -> axle_crack::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scale: f64 = args.first().map_or(0.02, |s| s.parse().expect("scale"));
    let epochs: usize = args.get(1).map_or(5, |s| s.parse().expect("epochs"));
    let seed: u64 = args.get(2).map_or(1, |s| s.parse().expect("seed"));

    let ds = synth_corpus(&CorpusSpec::new(scale, seed), &SynthConfig::default())?;
    let data = prepare(&ds, &DataConfig { seed, ..DataConfig::default() })?;
    println!(
        "train {} / val {} / test WA1 {} WA2 {} WA3 {}; reference pool {}",
        data.splits.train.len(),
        data.splits.val.len(),
        data.splits.test_wa1.len(),
        data.splits.test_wa2.len(),
        data.splits.test_wa3.len(),
        data.pool.len()
    );

    let model = build_model(&ArchConfig::for_variant(Variant::Differential), seed)?;
    let config = TrainConfig {
        max_epochs: epochs,
        patience: epochs,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(model, &data, &config)?;
    for h in &outcome.history {
        println!("epoch {:>2}: loss {:.4}, validation AUC {:.4}", h.epoch, h.train_loss, h.val_auc);
    }

    let dir = std::env::temp_dir().join("axle_train_differential");
    std::fs::create_dir_all(&dir).map_err(|e| axle_crack::Error::Io { path: dir.clone(), source: e })?;
    let ckpt = dir.join("model.axck");
    save_checkpoint(&outcome.model, &ckpt)?;
    let model = load_checkpoint(&ckpt)?;

    let report = EvalReport::new("differential", evaluate_combinations(&model, &data, seed)?)?;
    emit_report(&report, &dir)?;
    print!("\n{}", report.summary_markdown());
    println!("\nreports in {}", dir.display());
    Ok(())
}
