use std::path::Path;

use axle_crack::autodiff::{Mode, Tape, Tensor};
use axle_crack::cli::run;
use axle_crack::dataio::{read_dataset, ConditionVector, DefectClass, Wheelset};
use axle_crack::dsp::{preprocess, DspConfig, PROCESSED_LEN};
use axle_crack::models::{
    build_model, decode_checkpoint, encode_checkpoint, forward_differential, load_checkpoint, ArchConfig, Variant,
};
use axle_crack::rng;
use axle_crack::synthgen::{make_wa_profile, synth_record};
use axle_crack::traineval::{prepare, predict, DataConfig};

fn axle(args: &[&str]) -> i32 {
    run(std::iter::once("axle").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn reloaded_checkpoint_gives_identical_log_probabilities() {
    let model = build_model(&ArchConfig::default(), 21).unwrap();
    let back = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
    let cfg = &model.config;
    let mut r = rng::keyed(&[21]);
    let mut img = || {
        use rand::Rng;
        Tensor::new(vec![3, 128, 128], (0..3 * 128 * 128).map(|_| r.random_range(-2.0f32..2.0)).collect()).unwrap()
    };
    let (a, b) = (img(), img());
    let bits = [0.0, 1.0, 0.0, 1.0, 1.0];
    let logprobs = |m: &axle_crack::models::Model| {
        let mut t = Tape::new(&m.params);
        let lp = forward_differential(&mut t, cfg, a.clone(), b.clone(), &bits, Mode::Eval, &mut rng::keyed(&[0])).unwrap();
        t.value(lp).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(logprobs(&model), logprobs(&back));
}

#[test]
fn prep_writes_normalised_rotations() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let processed = dir.path().join("processed");
    assert_eq!(axle(&["synth", "--scale", "0.012", "--seed", "5", "--out", s(&raw)]), 0);
    assert_eq!(axle(&["prep", "--data", s(&raw), "--out", s(&processed)]), 0);

    let a = read_dataset(&raw).unwrap();
    let b = read_dataset(&processed).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!((x.id, x.conditions, x.defect), (y.id, y.conditions, y.defect));
        assert_eq!(y.samples.len(), PROCESSED_LEN);
        // preprocessing an already processed record is the identity
        let again = preprocess(y, &DspConfig::default()).unwrap();
        let mean = again.samples.iter().map(|&v| v as f64).sum::<f64>() / PROCESSED_LEN as f64;
        assert!(mean.abs() < 1e-5);
        for (p, q) in again.samples.iter().zip(&y.samples) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}

#[test]
fn cli_trains_and_evaluates_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(axle(&["synth", "--scale", "0.012", "--seed", "2", "--out", s(&data)]), 0);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nepochs = 1\nbatch = 8\nlogreg_iterations = 50\n").unwrap();

    for variant in ["differential", "noref", "cnn1d_lstm", "features-lr"] {
        let model = dir.path().join(format!("{variant}.axck"));
        let reports = dir.path().join(format!("reports-{variant}"));
        let code = axle(&[
            "train", "--variant", variant, "--data", s(&data), "--config", s(&cfg), "--seed", "3", "--out", s(&model),
        ]);
        assert_eq!(code, 0, "{variant}");
        assert_eq!(load_checkpoint(&model).unwrap().config.variant, variant.parse::<Variant>().unwrap());
        assert_eq!(axle(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(&reports)]), 0, "{variant}");
        let csv = std::fs::read_to_string(reports.join("combinations.csv")).unwrap();
        assert_eq!(csv.lines().count(), 33, "{variant}");
        assert!(reports.join("summary.md").exists());

        let summary_dir = dir.path().join(format!("summary-{variant}"));
        assert_eq!(axle(&["report", "--data", s(&reports), "--out", s(&summary_dir)]), 0);
        let md = std::fs::read_to_string(summary_dir.join("summary.md")).unwrap();
        assert!(md.contains("Speed"), "{md}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(axle(&["synth", "--scale", "0.012", "--seed", "4", "--out", s(&data)]), 0);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "variant = noref\nepochs = 1\nbatch = 8\nfusion = difference\n").unwrap();
    let model = dir.path().join("m.axck");
    let code = axle(&[
        "train", "--config", s(&cfg), "--variant", "differential", "--dropout", "0.5", "--data", s(&data), "--out",
        s(&model),
    ]);
    assert_eq!(code, 0);
    let m = load_checkpoint(&model).unwrap();
    assert_eq!(m.config.variant, Variant::Differential);
    assert_eq!(m.config.fusion.name(), "difference");
    assert_eq!(m.config.dropout_p, 0.5);
}

#[test]
fn evaluation_references_are_healthy_and_reproducible() {
    let mut id = 0;
    let mut records = Vec::new();
    for wa in Wheelset::ALL {
        let p = make_wa_profile(wa, 1);
        for combo in 0..32 {
            for defect in [DefectClass::D0, DefectClass::D0, DefectClass::D3] {
                id += 1;
                let c = ConditionVector::from_index(combo);
                records.push(synth_record(&p, id, c, defect, &mut rng::keyed(&[id])));
            }
        }
    }
    let ds = axle_crack::dataio::Dataset::new(records, "test").unwrap();
    let data = prepare(&ds, &DataConfig::default()).unwrap();
    let model = build_model(&ArchConfig::default(), 0).unwrap();
    let ids: Vec<u64> = data.splits.test_wa2.iter().take(6).copied().collect();
    let p1 = predict(&model, &data, &ids, 9).unwrap();
    let p2 = predict(&model, &data, &ids, 9).unwrap();
    assert_eq!(p1, p2);
    for id in ids {
        let r = axle_crack::traineval::eval_reference(&data, id, 9).unwrap();
        assert_eq!(data.label(r).unwrap(), 0);
        assert_eq!(data.signal(r).unwrap().wheelset, Wheelset::Wa2);
    }
}
