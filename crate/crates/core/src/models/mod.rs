//! Network assembly: the reference-conditioned 2-D CNN, its no-reference
//! ablation, the 1-D CNN + LSTM baseline and the hand-crafted feature +
//! logistic-regression baseline.
//!
//! Every deep variant is split into an embedding stage ([`embed`]) and a
//! head ([`head`]) so evaluation can embed each healthy reference once.

mod checkpoint;
mod features;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Activation, Mode, ParamId, ParameterSet, Scalar, Tape, Tensor, Var};
use crate::dsp::{ChannelScales, SPEC_CHANNELS, SPEC_SIZE, PROCESSED_LEN};
use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use features::{extract_classic_features, train_logreg, FeatureVector, LogRegConfig, LogRegModel, N_FEATURES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Differential,
    NoRef,
    Cnn1dLstm,
    FeaturesLr,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Differential => "differential",
            Variant::NoRef => "noref",
            Variant::Cnn1dLstm => "cnn1d_lstm",
            Variant::FeaturesLr => "features-lr",
        }
    }

    pub fn uses_reference(self) -> bool {
        matches!(self, Variant::Differential | Variant::Cnn1dLstm)
    }

    pub fn uses_images(self) -> bool {
        matches!(self, Variant::Differential | Variant::NoRef)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "differential" => Ok(Variant::Differential),
            "noref" => Ok(Variant::NoRef),
            "cnn1d_lstm" | "cnn1d-lstm" => Ok(Variant::Cnn1dLstm),
            "features-lr" | "features_lr" => Ok(Variant::FeaturesLr),
            other => Err(Error::arg(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fusion {
    /// `[sample, reference, static]` embeddings side by side.
    #[default]
    Concat,
    /// `[sample - reference, static]`.
    Difference,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "difference" => Ok(Fusion::Difference),
            other => Err(Error::arg(format!("unknown fusion {other:?}"))),
        }
    }
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Concat => "concat",
            Fusion::Difference => "difference",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub variant: Variant,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub conv1d_kernel: usize,
    pub dropout_p: f64,
    pub static_in: usize,
    pub static_out: usize,
    pub n_classes: usize,
    pub fusion: Fusion,
    pub image_size: usize,
    pub image_channels: usize,
    pub signal_len: usize,
    pub lstm_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            variant: Variant::Differential,
            conv_channels: vec![6, 16, 26, 36, 46, 56],
            kernel: 2,
            stride: 1,
            conv1d_kernel: 3,
            dropout_p: 0.7,
            static_in: 5,
            static_out: 10,
            n_classes: 4,
            fusion: Fusion::Concat,
            image_size: SPEC_SIZE,
            image_channels: SPEC_CHANNELS,
            signal_len: PROCESSED_LEN,
            lstm_hidden: 64,
        }
    }
}

impl ArchConfig {
    pub fn for_variant(variant: Variant) -> Self {
        ArchConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(format!("architecture: {m}")));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad(format!("conv_channels must be non-empty and positive, got {:?}", self.conv_channels));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.stride != 1 {
            return bad(format!("only stride 1 is supported, got {}", self.stride));
        }
        if self.kernel == 0 || self.conv1d_kernel == 0 {
            return bad("kernel sizes must be positive".into());
        }
        if self.n_classes < 2 || self.static_in == 0 || self.static_out == 0 {
            return bad("need at least two classes and a non-empty static path".into());
        }
        let halvings = self.conv_channels.len() as u32;
        match self.variant {
            Variant::Differential | Variant::NoRef => {
                if self.image_size >> halvings == 0 || self.image_size < 2 {
                    return bad(format!(
                        "a {0}x{0} image does not survive {halvings} halvings",
                        self.image_size
                    ));
                }
            }
            Variant::Cnn1dLstm => {
                if self.signal_len >> halvings == 0 || self.lstm_hidden == 0 {
                    return bad(format!("a {}-sample signal does not survive {halvings} halvings", self.signal_len));
                }
            }
            Variant::FeaturesLr => {}
        }
        Ok(())
    }

    /// Spatial side after the conv stack.
    pub fn final_image_side(&self) -> usize {
        self.conv_channels.iter().fold(self.image_size, |s, _| s / 2)
    }

    /// Sequence length reaching the LSTM.
    pub fn lstm_steps(&self) -> usize {
        self.conv_channels.iter().fold(self.signal_len, |s, _| s / 2)
    }

    /// Length of one branch embedding.
    pub fn embedding_len(&self) -> usize {
        match self.variant {
            Variant::Differential | Variant::NoRef => {
                let side = self.final_image_side();
                self.conv_channels.last().copied().unwrap_or(0) * side * side
            }
            Variant::Cnn1dLstm => self.lstm_hidden,
            Variant::FeaturesLr => N_FEATURES,
        }
    }

    pub fn fusion_inputs(&self) -> usize {
        let e = self.embedding_len();
        let branches = match (self.variant.uses_reference(), self.fusion) {
            (true, Fusion::Concat) => 2 * e,
            _ => e,
        };
        branches + self.static_out
    }

    pub fn to_kv_text(&self) -> String {
        let channels: Vec<String> = self.conv_channels.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("variant", self.variant.name().into());
        kv("conv_channels", channels.join(","));
        kv("kernel", self.kernel.to_string());
        kv("stride", self.stride.to_string());
        kv("conv1d_kernel", self.conv1d_kernel.to_string());
        kv("dropout_p", format!("{}", self.dropout_p));
        kv("static_in", self.static_in.to_string());
        kv("static_out", self.static_out.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("fusion", self.fusion.name().into());
        kv("image_size", self.image_size.to_string());
        kv("image_channels", self.image_channels.to_string());
        kv("signal_len", self.signal_len.to_string());
        kv("lstm_hidden", self.lstm_hidden.to_string());
        s
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("checkpoint config", format!("bad line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = ArchConfig::default();
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::format("checkpoint config", format!("{k} = {v:?}")))
        };
        for (k, v) in &map {
            match k.as_str() {
                "variant" => cfg.variant = v.parse()?,
                "conv_channels" => {
                    cfg.conv_channels = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|c| num(k, c.trim()))
                        .collect::<Result<_>>()?
                }
                "kernel" => cfg.kernel = num(k, v)?,
                "stride" => cfg.stride = num(k, v)?,
                "conv1d_kernel" => cfg.conv1d_kernel = num(k, v)?,
                "dropout_p" => {
                    cfg.dropout_p = v
                        .parse()
                        .map_err(|_| Error::format("checkpoint config", format!("dropout_p = {v:?}")))?
                }
                "static_in" => cfg.static_in = num(k, v)?,
                "static_out" => cfg.static_out = num(k, v)?,
                "n_classes" => cfg.n_classes = num(k, v)?,
                "fusion" => cfg.fusion = v.parse()?,
                "image_size" => cfg.image_size = num(k, v)?,
                "image_channels" => cfg.image_channels = num(k, v)?,
                "signal_len" => cfg.signal_len = num(k, v)?,
                "lstm_hidden" => cfg.lstm_hidden = num(k, v)?,
                other => return Err(Error::format("checkpoint config", format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Architecture, weights and the spectrogram channel scales used in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ArchConfig,
    pub params: ParameterSet<f32>,
    pub scales: ChannelScales,
    /// Free-form run settings (seeds, split ratios) carried in checkpoints.
    pub meta: BTreeMap<String, String>,
}

fn he_uniform(r: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Builds a model with He-uniform weights and zero biases drawn from `seed`.
pub fn build_model(config: &ArchConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut r = rng::keyed(&[rng::TAG_INIT, seed]);
    let mut p = ParameterSet::new();
    match config.variant {
        Variant::Differential | Variant::NoRef => {
            let mut c_in = config.image_channels;
            for (i, &c_out) in config.conv_channels.iter().enumerate() {
                let k = config.kernel;
                p.add(format!("conv{i}.weight"), he_uniform(&mut r, vec![c_out, c_in, k, k], c_in * k * k))?;
                p.add(format!("conv{i}.bias"), Tensor::zeros(vec![c_out]))?;
                c_in = c_out;
            }
        }
        Variant::Cnn1dLstm => {
            let mut c_in = 1;
            let k = config.conv1d_kernel;
            for (i, &c_out) in config.conv_channels.iter().enumerate() {
                p.add(format!("conv1d{i}.weight"), he_uniform(&mut r, vec![c_out, c_in, k], c_in * k))?;
                p.add(format!("conv1d{i}.bias"), Tensor::zeros(vec![c_out]))?;
                c_in = c_out;
            }
            let m = config.lstm_hidden;
            p.add("lstm.weight", he_uniform(&mut r, vec![4 * m, c_in + m], c_in + m))?;
            p.add("lstm.bias", Tensor::zeros(vec![4 * m]))?;
        }
        Variant::FeaturesLr => {
            let lr = LogRegModel::untrained(config.n_classes, N_FEATURES);
            return Ok(Model {
                config: config.clone(),
                params: lr.to_params()?,
                scales: ChannelScales::default(),
                meta: BTreeMap::new(),
            });
        }
    }
    let (si, so) = (config.static_in, config.static_out);
    p.add("static.weight", he_uniform(&mut r, vec![so, si], si))?;
    p.add("static.bias", Tensor::zeros(vec![so]))?;
    let fi = config.fusion_inputs();
    p.add("fusion.weight", he_uniform(&mut r, vec![config.n_classes, fi], fi))?;
    p.add("fusion.bias", Tensor::zeros(vec![config.n_classes]))?;
    Ok(Model {
        config: config.clone(),
        params: p,
        scales: ChannelScales::default(),
        meta: BTreeMap::new(),
    })
}

fn param_ids<T: Scalar>(params: &ParameterSet<T>, prefix: &str) -> Result<(ParamId, ParamId)> {
    Ok((params.require(&format!("{prefix}.weight"))?, params.require(&format!("{prefix}.bias"))?))
}

/// One branch: conv stack over a `3 x S x S` image, or conv1d stack + LSTM
/// over a `1 x L` signal. Returns the flat embedding (before dropout).
pub fn embed<T: Scalar>(tape: &mut Tape<'_, T>, config: &ArchConfig, input: Tensor<T>) -> Result<Var> {
    match config.variant {
        Variant::Differential | Variant::NoRef => {
            let expected = [config.image_channels, config.image_size, config.image_size];
            if input.shape() != expected {
                return Err(Error::shape("embed", format!("image {:?}, expected {expected:?}", input.shape())));
            }
            let mut x = tape.input(input);
            for i in 0..config.conv_channels.len() {
                let (w, b) = param_ids(tape.params(), &format!("conv{i}"))?;
                let (w, b) = (tape.param(w), tape.param(b));
                let y = tape.conv2d_same(x, w, b)?;
                let y = tape.relu(y);
                x = tape.maxpool2(y)?;
            }
            Ok(tape.flatten(x))
        }
        Variant::Cnn1dLstm => {
            let n = config.signal_len;
            if input.len() != n {
                return Err(Error::shape("embed", format!("signal of {} samples, expected {n}", input.len())));
            }
            let mut x = tape.input(input.reshaped(vec![1, n])?);
            for i in 0..config.conv_channels.len() {
                let (w, b) = param_ids(tape.params(), &format!("conv1d{i}"))?;
                let (w, b) = (tape.param(w), tape.param(b));
                let y = tape.conv1d_same(x, w, b)?;
                let y = tape.relu(y);
                x = tape.maxpool1(y)?;
            }
            // time-major: one row per step
            let seq = tape.transpose(x)?;
            let (steps, width) = (tape.shape(seq)[0], tape.shape(seq)[1]);
            let (w, b) = param_ids(tape.params(), "lstm")?;
            let (w, b) = (tape.param(w), tape.param(b));
            let m = config.lstm_hidden;
            let mut h = tape.input(Tensor::zeros(vec![m]));
            let mut c = tape.input(Tensor::zeros(vec![m]));
            for t in 0..steps {
                let xt = tape.slice(seq, t * width, width)?;
                (h, c) = tape.lstm_step(xt, h, c, w, b)?;
            }
            Ok(h)
        }
        Variant::FeaturesLr => Err(Error::arg("the feature baseline has no embedding network")),
    }
}

/// Static path, branch dropout, fusion layer and log-softmax. Returns the
/// log-probabilities.
pub fn head<T: Scalar>(
    tape: &mut Tape<'_, T>,
    config: &ArchConfig,
    sample: Var,
    reference: Option<Var>,
    static_bits: &[f32],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if static_bits.len() != config.static_in {
        return Err(Error::shape(
            "head",
            format!("{} static inputs, expected {}", static_bits.len(), config.static_in),
        ));
    }
    // Both branches drop the same embedding positions, so a kept unit is
    // always seen for the sample and its reference together.
    let mask_key: u64 = rng.random();
    let sample = tape.dropout(sample, config.dropout_p, mode, &mut crate::rng::keyed(&[mask_key]))?;
    let branches = match (config.variant.uses_reference(), reference) {
        (true, Some(r)) => {
            let r = tape.dropout(r, config.dropout_p, mode, &mut crate::rng::keyed(&[mask_key]))?;
            match config.fusion {
                Fusion::Concat => vec![sample, r],
                Fusion::Difference => vec![tape.sub(sample, r)?],
            }
        }
        (false, None) => vec![sample],
        (true, None) => return Err(Error::arg(format!("{} needs a reference input", config.variant))),
        (false, Some(_)) => return Err(Error::arg(format!("{} takes no reference input", config.variant))),
    };
    let s = tape.input(Tensor::from_f32(vec![static_bits.len()], static_bits)?);
    let (sw, sb) = param_ids(tape.params(), "static")?;
    let (sw, sb) = (tape.param(sw), tape.param(sb));
    let s = tape.dense(s, sw, sb, Activation::Relu)?;

    let mut parts = branches;
    parts.push(s);
    let fused = tape.concat(&parts);
    let (fw, fb) = param_ids(tape.params(), "fusion")?;
    let (fw, fb) = (tape.param(fw), tape.param(fb));
    let logits = tape.dense(fused, fw, fb, Activation::None)?;
    Ok(tape.log_softmax(logits))
}

fn check_variant(config: &ArchConfig, want: Variant) -> Result<()> {
    if config.variant != want {
        return Err(Error::arg(format!("model variant is {}, expected {want}", config.variant)));
    }
    Ok(())
}

pub fn forward_differential<T: Scalar>(
    tape: &mut Tape<'_, T>,
    config: &ArchConfig,
    spec: Tensor<T>,
    ref_spec: Tensor<T>,
    static_bits: &[f32],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    check_variant(config, Variant::Differential)?;
    let a = embed(tape, config, spec)?;
    let b = embed(tape, config, ref_spec)?;
    head(tape, config, a, Some(b), static_bits, mode, rng)
}

pub fn forward_noref<T: Scalar>(
    tape: &mut Tape<'_, T>,
    config: &ArchConfig,
    spec: Tensor<T>,
    static_bits: &[f32],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    check_variant(config, Variant::NoRef)?;
    let a = embed(tape, config, spec)?;
    head(tape, config, a, None, static_bits, mode, rng)
}

pub fn forward_cnn1d_lstm<T: Scalar>(
    tape: &mut Tape<'_, T>,
    config: &ArchConfig,
    signal: Tensor<T>,
    ref_signal: Tensor<T>,
    static_bits: &[f32],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    check_variant(config, Variant::Cnn1dLstm)?;
    let a = embed(tape, config, signal)?;
    let b = embed(tape, config, ref_signal)?;
    head(tape, config, a, Some(b), static_bits, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use rand::Rng;

    fn random_tensor<T: Scalar>(r: &mut impl Rng, shape: Vec<usize>) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::of(r.random_range(-1.0..1.0))).collect()).unwrap()
    }

    fn probs_sum(tape: &Tape<'_, f32>, v: Var) -> f64 {
        tape.value(v).data().iter().map(|&x| (x as f64).exp()).sum()
    }

    #[test]
    fn default_parameter_count() {
        let m = build_model(&ArchConfig::default(), 0).unwrap();
        assert_eq!(m.params.trainable_count(), 24_874);
        let conv: usize = m.params.iter().filter(|(n, _)| n.starts_with("conv")).map(|(_, t)| t.len()).sum();
        assert_eq!(conv, 22_978);
        assert_eq!(m.params.get(m.params.id("static.weight").unwrap()).len() + 10, 60);
        assert_eq!(m.params.get(m.params.id("fusion.weight").unwrap()).shape(), &[4, 458]);
        assert_eq!(m.config.embedding_len(), 224);
    }

    #[test]
    fn config_validation() {
        let mut c = ArchConfig::default();
        c.conv_channels.clear();
        assert!(build_model(&c, 0).is_err());
        let mut c = ArchConfig::default();
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        let mut c = ArchConfig::default();
        c.conv_channels = vec![4; 8];
        assert!(c.validate().is_err());
        let c = ArchConfig::for_variant(Variant::Cnn1dLstm);
        assert_eq!(c.lstm_steps(), 31);
    }

    #[test]
    fn init_is_deterministic() {
        let a = build_model(&ArchConfig::default(), 5).unwrap();
        assert_eq!(a, build_model(&ArchConfig::default(), 5).unwrap());
        assert_ne!(a.params, build_model(&ArchConfig::default(), 6).unwrap().params);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = ArchConfig::for_variant(Variant::Cnn1dLstm);
        c.fusion = Fusion::Difference;
        c.dropout_p = 0.25;
        assert_eq!(ArchConfig::from_kv_text(&c.to_kv_text()).unwrap(), c);
        assert!(ArchConfig::from_kv_text("bogus=1").is_err());
    }

    fn small_image_config(variant: Variant) -> ArchConfig {
        ArchConfig {
            variant,
            conv_channels: vec![4, 5, 6],
            image_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn differential_outputs_are_distributions() {
        let cfg = ArchConfig::default();
        let m = build_model(&cfg, 1).unwrap();
        let mut r = rng::keyed(&[1]);
        let mut t = Tape::new(&m.params);
        let lp = forward_differential(
            &mut t,
            &cfg,
            random_tensor(&mut r, vec![3, 128, 128]),
            random_tensor(&mut r, vec![3, 128, 128]),
            &[1.0, 0.0, 1.0, 0.0, 1.0],
            Mode::Eval,
            &mut r,
        )
        .unwrap();
        assert!((probs_sum(&t, lp) - 1.0).abs() < 1e-6);
        let bad = forward_differential(
            &mut t,
            &cfg,
            random_tensor(&mut r, vec![3, 64, 64]),
            random_tensor(&mut r, vec![3, 128, 128]),
            &[0.0; 5],
            Mode::Eval,
            &mut r,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn difference_fusion_with_identical_inputs_ignores_images() {
        let mut cfg = small_image_config(Variant::Differential);
        cfg.fusion = Fusion::Difference;
        let m = build_model(&cfg, 2).unwrap();
        let mut r = rng::keyed(&[2]);
        let bits = [0.0, 1.0, 1.0, 0.0, 1.0];
        let run = |img: Tensor<f32>, r: &mut crate::rng::StreamRng| {
            let mut t = Tape::new(&m.params);
            let lp = forward_differential(&mut t, &cfg, img.clone(), img, &bits, Mode::Eval, r).unwrap();
            t.value(lp).data().to_vec()
        };
        let a = run(random_tensor(&mut r, vec![3, 8, 8]), &mut r);
        let b = run(random_tensor(&mut r, vec![3, 8, 8]), &mut r);
        assert_eq!(a, b);
    }

    #[test]
    fn branches_share_the_dropout_mask() {
        let mut cfg = small_image_config(Variant::Differential);
        cfg.fusion = Fusion::Difference;
        let m = build_model(&cfg, 2).unwrap();
        let mut r = rng::keyed(&[4]);
        let bits = [1.0, 1.0, 0.0, 0.0, 1.0];
        let run = |img: Tensor<f32>| {
            let mut t = Tape::new(&m.params);
            let mut dr = rng::keyed(&[99]);
            let lp = forward_differential(&mut t, &cfg, img.clone(), img, &bits, Mode::Train, &mut dr).unwrap();
            t.value(lp).data().to_vec()
        };
        assert_eq!(run(random_tensor(&mut r, vec![3, 8, 8])), run(random_tensor(&mut r, vec![3, 8, 8])));
    }

    #[test]
    fn concat_fusion_is_order_sensitive() {
        let cfg = small_image_config(Variant::Differential);
        let m = build_model(&cfg, 3).unwrap();
        let mut r = rng::keyed(&[3]);
        let x: Tensor<f32> = random_tensor(&mut r, vec![3, 8, 8]);
        let y: Tensor<f32> = random_tensor(&mut r, vec![3, 8, 8]);
        let bits = [1.0; 5];
        let mut t = Tape::new(&m.params);
        let ab = forward_differential(&mut t, &cfg, x.clone(), y.clone(), &bits, Mode::Eval, &mut r).unwrap();
        let ba = forward_differential(&mut t, &cfg, y, x, &bits, Mode::Eval, &mut r).unwrap();
        assert_ne!(t.value(ab).data(), t.value(ba).data());
    }

    #[test]
    fn weight_sharing_is_structural() {
        let cfg = small_image_config(Variant::Differential);
        let mut m = build_model(&cfg, 4).unwrap();
        let mut r = rng::keyed(&[4]);
        let x: Tensor<f32> = random_tensor(&mut r, vec![3, 8, 8]);
        let y: Tensor<f32> = random_tensor(&mut r, vec![3, 8, 8]);
        let embeddings = |m: &Model| {
            let mut t = Tape::new(&m.params);
            let a = embed(&mut t, &cfg, x.clone()).unwrap();
            let b = embed(&mut t, &cfg, y.clone()).unwrap();
            (t.value(a).data().to_vec(), t.value(b).data().to_vec())
        };
        let before = embeddings(&m);
        let id = m.params.id("conv0.bias").unwrap();
        m.params.get_mut(id).data_mut()[0] += 0.5;
        let after = embeddings(&m);
        assert_ne!(before.0, after.0);
        assert_ne!(before.1, after.1);
    }

    #[test]
    fn shared_branch_gradient_is_sum_of_unshared_copies() {
        let cfg = small_image_config(Variant::Differential);
        let m = build_model(&cfg, 5).unwrap().params.cast::<f64>();
        let mut r = rng::keyed(&[5]);
        let x: Tensor<f64> = random_tensor(&mut r, vec![3, 8, 8]);
        let y: Tensor<f64> = random_tensor(&mut r, vec![3, 8, 8]);
        let bits = [1.0, 0.0, 0.0, 1.0, 1.0];

        let mut t = Tape::new(&m);
        let lp = forward_differential(&mut t, &cfg, x.clone(), y.clone(), &bits, Mode::Eval, &mut r).unwrap();
        let loss = t.nll(lp, 2).unwrap();
        let shared = t.backward(loss).unwrap();

        // two-copy construction: branch B reads its own duplicate tensors
        let mut dup = m.clone();
        for i in 0..cfg.conv_channels.len() {
            for part in ["weight", "bias"] {
                let name = format!("conv{i}.{part}");
                let t = m.get(m.id(&name).unwrap()).clone();
                dup.add(format!("copy.{name}"), t).unwrap();
            }
        }
        let mut t = Tape::new(&dup);
        let a = embed(&mut t, &cfg, x).unwrap();
        let mut xb = t.input(y);
        for i in 0..cfg.conv_channels.len() {
            let w = t.param_named(&format!("copy.conv{i}.weight")).unwrap();
            let b = t.param_named(&format!("copy.conv{i}.bias")).unwrap();
            let c = t.conv2d_same(xb, w, b).unwrap();
            let c = t.relu(c);
            xb = t.maxpool2(c).unwrap();
        }
        let b = t.flatten(xb);
        let lp = head(&mut t, &cfg, a, Some(b), &bits, Mode::Eval, &mut r).unwrap();
        let loss = t.nll(lp, 2).unwrap();
        let split = t.backward(loss).unwrap();

        for i in 0..cfg.conv_channels.len() {
            for part in ["weight", "bias"] {
                let name = format!("conv{i}.{part}");
                let s = shared.get(m.id(&name).unwrap());
                let a = split.get(dup.id(&name).unwrap());
                let b = split.get(dup.id(&format!("copy.{name}")).unwrap());
                for ((&s, &a), &b) in s.iter().zip(a).zip(b) {
                    assert!((s - (a + b)).abs() <= 1e-12 * (1.0 + s.abs()), "{name}: {s} vs {}", a + b);
                }
            }
        }
    }

    #[test]
    fn small_differential_model_gradients() {
        let cfg = small_image_config(Variant::Differential);
        let params = build_model(&cfg, 6).unwrap().params.cast::<f64>();
        let mut r = rng::keyed(&[6]);
        let x: Tensor<f64> = random_tensor(&mut r, vec![3, 8, 8]);
        let y: Tensor<f64> = random_tensor(&mut r, vec![3, 8, 8]);
        let rep = grad_check(
            |t| {
                let mut r = rng::keyed(&[0]);
                let lp = forward_differential(t, &cfg, x.clone(), y.clone(), &[1.0, 0.0, 1.0, 1.0, 0.0], Mode::Eval, &mut r)?;
                t.nll(lp, 1)
            },
            &params,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn noref_and_lstm_variants() {
        let cfg = small_image_config(Variant::NoRef);
        assert_eq!(cfg.fusion_inputs(), 6 + 10);
        let m = build_model(&cfg, 7).unwrap();
        let mut r = rng::keyed(&[7]);
        let mut t = Tape::new(&m.params);
        let lp = forward_noref(&mut t, &cfg, random_tensor(&mut r, vec![3, 8, 8]), &[0.0; 5], Mode::Train, &mut r).unwrap();
        assert!((probs_sum(&t, lp) - 1.0).abs() < 1e-6);
        assert!(forward_differential(
            &mut t,
            &cfg,
            random_tensor(&mut r, vec![3, 8, 8]),
            random_tensor(&mut r, vec![3, 8, 8]),
            &[0.0; 5],
            Mode::Eval,
            &mut r
        )
        .is_err());

        let cfg = ArchConfig::for_variant(Variant::Cnn1dLstm);
        let m = build_model(&cfg, 8).unwrap();
        let mut t = Tape::new(&m.params);
        let lp = forward_cnn1d_lstm(
            &mut t,
            &cfg,
            random_tensor(&mut r, vec![2000]),
            random_tensor(&mut r, vec![2000]),
            &[1.0; 5],
            Mode::Eval,
            &mut r,
        )
        .unwrap();
        assert!((probs_sum(&t, lp) - 1.0).abs() < 1e-6);
    }
}
