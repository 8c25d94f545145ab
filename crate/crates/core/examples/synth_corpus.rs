//! Generates a small synthetic corpus and writes it in the on-disk layout.
//!
//! cargo run --release --example synth_corpus -- [scale] [seed] [out_dir]

use std::path::PathBuf;

use axle_crack::dataio::{read_dataset, write_dataset, DefectClass, Wheelset};
use axle_crack::synthgen::{make_wa_profile, synth_corpus, CorpusSpec, SynthConfig};

fn main() -> axle_crack::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scale: f64 = args.first().map_or(Ok(0.01), |s| s.parse()).expect("scale");
    let seed: u64 = args.get(1).map_or(Ok(7), |s| s.parse()).expect("seed");
    let out = args.get(2).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("axle_synth_corpus"));

    for wa in Wheelset::ALL {
        let p = make_wa_profile(wa, seed);
        println!(
            "{wa}: resonances {:?} Hz, crack gains {:.3?}, noise sigma {:.3}",
            p.resonance_freqs.iter().map(|f| f.round()).collect::<Vec<_>>(),
            p.harmonic_base_amps,
            p.noise_floor_sigma
        );
    }

    let ds = synth_corpus(&CorpusSpec::new(scale, seed), &SynthConfig::default())?;
    println!("\n{:>4} {:>6} {:>6} {:>6} {:>6}", "", "D0", "D1", "D2", "D3");
    for wa in Wheelset::ALL {
        let counts = DefectClass::ALL.map(|d| ds.of_wheelset(wa).filter(|r| r.defect == d).count());
        println!("{wa:>4} {:>6} {:>6} {:>6} {:>6}", counts[0], counts[1], counts[2], counts[3]);
    }

    write_dataset(&ds, &out)?;
    let back = read_dataset(&out)?;
    assert_eq!(back.records, ds.records);
    println!("\nwrote and re-read {} records under {}", ds.len(), out.display());
    Ok(())
}
