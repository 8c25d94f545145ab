//! The `axle` command line: `synth`, `prep`, `train`, `eval`, `report` and
//! `check`, configured by a flat `key = value` file plus flag overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::OptimizerKind;
use crate::dataio::{read_dataset, write_dataset, Dataset, SplitRatios, VibrationRecord, Wheelset};
use crate::dsp::{preprocess, DspConfig, ResampleMode, DEFAULT_WHEEL_DIAMETER_M};
use crate::error::{Error, Result};
use crate::models::{build_model, load_checkpoint, save_checkpoint, ArchConfig, Fusion, Variant};
use crate::synthgen::{synth_corpus, CorpusSpec, ProfileRanges, SynthConfig, N_HARMONICS};
use crate::traineval::{
    emit_report, evaluate_combinations, prepare, summarize, train, CombinationTable, DataConfig, EvalReport,
    TrainConfig,
};
use crate::verify::run_checks;

/// Every configurable knob with its default. Keys in a config file use the
/// field names.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: f64,
    pub variant: Variant,
    pub fusion: Fusion,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub ref_fraction: f64,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub split: SplitRatios,
    pub resample: ResampleMode,
    pub wheel_diameter_m: f64,
    pub logreg_iterations: usize,
    /// Worker threads; `0` means "take `AXLE_THREADS`, else 1".
    pub threads: usize,
    /// Corpus seed for `synth`; `None` uses `seed`.
    pub master_seed: Option<u64>,
    pub noise_sigma: Option<f64>,
    pub harmonic_exponents: [f64; N_HARMONICS],
    /// Per-wheelset profile ranges, keys `wa1.crack_amp` etc.
    pub ranges: [ProfileRanges; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let synth = SynthConfig::default();
        RunConfig {
            seed: 0,
            scale: 0.1,
            variant: Variant::Differential,
            fusion: Fusion::Concat,
            epochs: t.max_epochs,
            batch: t.batch_size,
            lr: t.lr,
            dropout: t.dropout_p,
            ref_fraction: t.reference_fraction,
            patience: t.patience,
            optimizer: t.optimizer,
            split: SplitRatios::default(),
            resample: ResampleMode::Linear,
            wheel_diameter_m: DEFAULT_WHEEL_DIAMETER_M,
            logreg_iterations: t.logreg_iterations,
            threads: 0,
            master_seed: None,
            noise_sigma: None,
            harmonic_exponents: synth.harmonic_exponents,
            ranges: synth.ranges,
        }
    }
}

const RANGE_KEYS: [&str; 6] = [
    "resonance_freq_hz",
    "resonance_gain",
    "crack_amp",
    "residual_amp",
    "noise_sigma",
    "channel_gain",
];

fn range_field<'a>(r: &'a mut ProfileRanges, name: &str) -> Option<&'a mut (f64, f64)> {
    Some(match name {
        "resonance_freq_hz" => &mut r.resonance_freq_hz,
        "resonance_gain" => &mut r.resonance_gain,
        "crack_amp" => &mut r.crack_amp,
        "residual_amp" => &mut r.residual_amp,
        "noise_sigma" => &mut r.noise_sigma,
        "channel_gain" => &mut r.channel_gain,
        _ => return None,
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "fusion" => self.fusion = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "ref_fraction" => self.ref_fraction = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "split" => {
                let r = parse_list(key, v)?;
                if r.len() != 3 {
                    return Err(Error::Config(format!("split needs three ratios, got {v:?}")));
                }
                self.split = SplitRatios {
                    train: r[0],
                    val: r[1],
                    test: r[2],
                };
            }
            "resample" => self.resample = v.parse()?,
            "wheel_diameter_m" => self.wheel_diameter_m = parse(key, v)?,
            "logreg_iterations" => self.logreg_iterations = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "master_seed" => self.master_seed = parse_optional(key, v)?,
            "noise_sigma" => self.noise_sigma = parse_optional(key, v)?,
            "harmonic_exponents" => {
                let e = parse_list(key, v)?;
                self.harmonic_exponents = e
                    .try_into()
                    .map_err(|_| Error::Config(format!("harmonic_exponents needs {N_HARMONICS} values, got {v:?}")))?;
            }
            other => {
                let unknown = || Error::Config(format!("unknown key {other:?}"));
                let (wa, field) = other.split_once('.').ok_or_else(unknown)?;
                let wa: Wheelset = wa.to_uppercase().parse().map_err(|_| unknown())?;
                let slot = range_field(&mut self.ranges[wa.index()], field).ok_or_else(unknown)?;
                match parse_list(key, v)?[..] {
                    [lo, hi] => *slot = (lo, hi),
                    _ => return Err(Error::Config(format!("{key} needs lo,hi, got {v:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment, blank lines are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let s = self.split;
        let mut out = String::new();
        let lines = [
            ("seed", self.seed.to_string()),
            ("scale", self.scale.to_string()),
            ("variant", self.variant.name().to_string()),
            ("fusion", self.fusion.name().to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("dropout", self.dropout.to_string()),
            ("ref_fraction", self.ref_fraction.to_string()),
            ("patience", self.patience.to_string()),
            ("optimizer", optimizer_name(self.optimizer).to_string()),
            ("split", format!("{},{},{}", s.train, s.val, s.test)),
            ("resample", self.resample.name().to_string()),
            ("wheel_diameter_m", self.wheel_diameter_m.to_string()),
            ("logreg_iterations", self.logreg_iterations.to_string()),
            ("threads", self.threads.to_string()),
            ("master_seed", show_optional(&self.master_seed)),
            ("noise_sigma", show_optional(&self.noise_sigma)),
            (
                "harmonic_exponents",
                self.harmonic_exponents.map(|e| e.to_string()).join(","),
            ),
        ];
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        for wa in Wheelset::ALL {
            let mut r = self.ranges[wa.index()];
            for field in RANGE_KEYS {
                let (lo, hi) = *range_field(&mut r, field).expect("listed field");
                let _ = writeln!(out, "{}.{field} = {lo},{hi}", wa.name().to_lowercase());
            }
        }
        out
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            wheel_diameter_m: self.wheel_diameter_m,
            noise_sigma: self.noise_sigma,
            harmonic_exponents: self.harmonic_exponents,
            ranges: self.ranges,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            ratios: self.split,
            reference_fraction: self.ref_fraction,
            seed: self.seed,
            dsp: self.dsp_config(),
        }
    }

    pub fn dsp_config(&self) -> DspConfig {
        DspConfig {
            wheel_diameter_m: self.wheel_diameter_m,
            resample_mode: self.resample,
            ..DspConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            dropout_p: self.dropout,
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: self.patience.min(self.epochs),
            seed: self.seed,
            reference_fraction: self.ref_fraction,
            optimizer: self.optimizer,
            logreg_iterations: self.logreg_iterations,
        }
    }

    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            fusion: self.fusion,
            dropout_p: self.dropout,
            ..ArchConfig::for_variant(self.variant)
        }
    }

    /// Thread count after resolving `0` against `AXLE_THREADS`.
    pub fn resolved_threads(&self) -> Result<usize> {
        if self.threads > 0 {
            return Ok(self.threads);
        }
        match std::env::var("AXLE_THREADS") {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::Config(format!("AXLE_THREADS must be a positive integer, got {v:?}"))),
            },
            Err(_) => Ok(1),
        }
    }
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    }
}

#[derive(Parser, Debug)]
#[command(name = "axle", about = "Railway axle crack severity pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (manifest.csv plus .axsg signals).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Fraction of the full-size record counts to generate.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample and normalise raw captures into one-rotation signals.
    Prep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write an .axck checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        knobs: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint per condition combination and write reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise an existing combinations.csv into summary.md.
    Report {
        #[command(flatten)]
        common: Common,
        /// A combinations.csv file, or a directory containing one.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient-check and oracle suites.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: AXLE_THREADS, else 1).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// differential, noref, cnn1d_lstm or features-lr.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// concat or difference.
    #[arg(long)]
    fusion: Option<String>,
    /// Share of healthy records held out as the reference pool.
    #[arg(long = "ref-fraction")]
    ref_fraction: Option<f64>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        c.apply_text(&text)?;
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(t) = common.threads {
        c.threads = t;
    }
    Ok(c)
}

fn apply_train_flags(c: &mut RunConfig, f: &TrainFlags) -> Result<()> {
    let mut pairs: Vec<(&str, String)> = Vec::new();
    if let Some(v) = &f.variant {
        pairs.push(("variant", v.clone()));
    }
    if let Some(v) = &f.fusion {
        pairs.push(("fusion", v.clone()));
    }
    if let Some(v) = f.epochs {
        pairs.push(("epochs", v.to_string()));
    }
    if let Some(v) = f.batch {
        pairs.push(("batch", v.to_string()));
    }
    if let Some(v) = f.lr {
        pairs.push(("lr", v.to_string()));
    }
    if let Some(v) = f.dropout {
        pairs.push(("dropout", v.to_string()));
    }
    if let Some(v) = f.ref_fraction {
        pairs.push(("ref_fraction", v.to_string()));
    }
    for (k, v) in pairs {
        c.set(k, &v)?;
    }
    Ok(())
}

fn init_threads(c: &RunConfig) -> Result<()> {
    let n = c.resolved_threads()?;
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(c: &RunConfig, out: &Path) -> Result<()> {
    let ds = synth_corpus(&CorpusSpec::new(c.scale, c.master_seed.unwrap_or(c.seed)), &c.synth_config())?;
    write_dataset(&ds, out)?;
    println!("wrote {} records to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_prep(c: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    let dsp = c.dsp_config();
    let records = ds
        .records
        .iter()
        .map(|r| {
            let p = preprocess(r, &dsp)?;
            Ok(VibrationRecord {
                samples: p.samples,
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = records.len();
    write_dataset(&Dataset::new(records, format!("{} (processed)", ds.provenance))?, out)?;
    println!("wrote {n} processed records to {}", out.display());
    Ok(())
}

fn cmd_train(c: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    let prepared = prepare(&ds, &c.data_config())?;
    drop(ds);
    let model = build_model(&c.arch_config(), c.seed)?;
    let outcome = train(model, &prepared, &c.train_config())?;
    for h in &outcome.history {
        eprintln!("epoch {:>3}  loss {:.4}  val AUC {:.4}", h.epoch, h.train_loss, h.val_auc);
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(dir)?;
    }
    save_checkpoint(&outcome.model, out)?;
    println!(
        "best epoch {} (validation AUC {:.4}); saved {}",
        outcome.best_epoch,
        outcome.best_val_auc,
        out.display()
    );
    Ok(())
}

fn cmd_eval(c: &RunConfig, seed_flag: Option<u64>, model_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    let data_config = DataConfig::from_meta(&model.meta)?;
    let seed = match seed_flag {
        Some(s) => s,
        None => model.meta.get("train_seed").map(|s| s.parse()).transpose().map_err(|_| {
            Error::Config("checkpoint metadata train_seed is not an integer".into())
        })?.unwrap_or(c.seed),
    };
    let ds = read_dataset(data)?;
    let prepared = prepare(&ds, &data_config)?;
    drop(ds);
    let evaluation = evaluate_combinations(&model, &prepared, seed)?;
    let report = EvalReport::new(model.config.variant.name(), evaluation)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit_report(&report, out)?;
    print!("{}", report.summary_markdown());
    Ok(())
}

fn cmd_report(data: &Path, out: &Path) -> Result<()> {
    let path = if data.is_dir() { data.join("combinations.csv") } else { data.to_path_buf() };
    let table = CombinationTable::read(&path)?;
    let summary = summarize(&table)?;
    let report = EvalReport {
        model: path.display().to_string(),
        table,
        summary,
        roc: Vec::new(),
        warnings: Vec::new(),
    };
    make_dir(out)?;
    let md = report.summary_markdown();
    let target = out.join("summary.md");
    std::fs::write(&target, &md).map_err(|e| Error::io(&target, e))?;
    print!("{md}");
    Ok(())
}

fn cmd_check(c: &RunConfig) -> Result<bool> {
    let results = run_checks(c.seed)?;
    let mut ok = true;
    for r in &results {
        println!("{}", r.line());
        ok &= r.passed();
    }
    Ok(ok)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { common, scale, out } => {
            let mut c = load_config(&common)?;
            if let Some(s) = scale {
                c.scale = s;
            }
            init_threads(&c)?;
            cmd_synth(&c, &out)?;
        }
        Command::Prep { common, data, out } => {
            let c = load_config(&common)?;
            init_threads(&c)?;
            cmd_prep(&c, &data, &out)?;
        }
        Command::Train { common, knobs, data, out } => {
            let mut c = load_config(&common)?;
            apply_train_flags(&mut c, &knobs)?;
            init_threads(&c)?;
            cmd_train(&c, &data, &out)?;
        }
        Command::Eval { common, model, data, out } => {
            let c = load_config(&common)?;
            init_threads(&c)?;
            cmd_eval(&c, common.seed, &model, &data, &out)?;
        }
        Command::Report { common, data, out } => {
            load_config(&common)?;
            cmd_report(&data, &out)?;
        }
        Command::Check { common } => {
            let c = load_config(&common)?;
            init_threads(&c)?;
            return cmd_check(&c);
        }
    }
    Ok(true)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on a runtime failure, 2 on a usage
/// error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ (Error::Config(_) | Error::Argument(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.variant = Variant::Cnn1dLstm;
        c.fusion = Fusion::Difference;
        c.split = SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        };
        c.resample = ResampleMode::Decimate;
        c.master_seed = Some(3);
        c.ranges[1].noise_sigma = (0.25, 0.5);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let text = RunConfig::default().to_text();
        assert_eq!(text.lines().count(), 19 + 3 * RANGE_KEYS.len());
        for line in text.lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            RunConfig::default().set(k, v).unwrap();
        }
        assert_eq!(RunConfig::from_text(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn synth_keys() {
        let c = RunConfig::from_text("master_seed = 4\nnoise_sigma = 0.2\nharmonic_exponents = 1,2,3\nwa3.crack_amp = 0.1, 0.2\n")
            .unwrap();
        assert_eq!((c.master_seed, c.noise_sigma), (Some(4), Some(0.2)));
        assert_eq!(c.harmonic_exponents, [1.0, 2.0, 3.0]);
        assert_eq!(c.ranges[2].crack_amp, (0.1, 0.2));
        assert_eq!(c.ranges[0], ProfileRanges::default_for(Wheelset::Wa1));
        assert!(RunConfig::from_text("wa4.crack_amp = 0,1").is_err());
        assert!(RunConfig::from_text("wa1.color = 0,1").is_err());
        assert!(RunConfig::from_text("wa1.crack_amp = 0.5").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::from_text("# run\n\nepochs = 7  # short\n lr=0.01\n").unwrap();
        assert_eq!((c.epochs, c.lr), (7, 0.01));
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(RunConfig::from_text("frobnicate = 1").is_err());
        assert!(RunConfig::from_text("epochs").is_err());
        assert!(RunConfig::from_text("epochs = many").is_err());
        assert!(RunConfig::from_text("split = 0.5,0.5").is_err());
        assert!(RunConfig::from_text("variant = resnet").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["axle", "train", "--frobnicate"]), 2);
        assert_eq!(run(["axle", "nonsense"]), 2);
        assert_eq!(run(["axle"]), 2);
    }

    #[test]
    fn runtime_failure_exits_1() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let code = run(["axle", "report", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 1);
    }

    #[test]
    fn bad_config_file_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "learning_rate = 1\n").unwrap();
        assert_eq!(run(["axle", "check", "--config", cfg.to_str().unwrap()]), 2);
    }
}
