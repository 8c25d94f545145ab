//! Hand-crafted time/frequency features and a multinomial logistic
//! regression on top of them.

use std::f64::consts::PI;

use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;

pub const N_FEATURES: usize = 9;

/// `[rms, variance, skewness, kurtosis, crest, peak-to-peak, |X1|, |X2|, |X3|]`
/// where `Xk` is the DFT amplitude at `k` times the rotation bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

fn dft_amplitude(x: &[f32], bin: usize) -> f64 {
    let n = x.len() as f64;
    let w = 2.0 * PI * bin as f64 / n;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let a = w * t as f64;
        re += v as f64 * a.cos();
        im -= v as f64 * a.sin();
    }
    2.0 * (re * re + im * im).sqrt() / n
}

/// Features of one processed signal. `rotation_bin` is the DFT bin of the
/// rotation frequency (1 when the signal spans exactly one rotation).
pub fn extract_classic_features(x: &[f32], rotation_bin: usize) -> Result<FeatureVector> {
    if x.is_empty() {
        return Err(Error::arg("cannot extract features from an empty signal"));
    }
    if 3 * rotation_bin >= x.len() / 2 + 1 {
        return Err(Error::arg(format!("rotation bin {rotation_bin} too high for {} samples", x.len())));
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    let (mut sq, mut peak, mut lo, mut hi) = (0.0, 0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &v in x {
        let v = v as f64;
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        sq += v * v;
        peak = peak.max(v.abs());
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let rms = (sq / n).sqrt();
    let (skew, kurt) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2)) } else { (0.0, 0.0) };
    let crest = if rms > 0.0 { peak / rms } else { 1.0 };
    let mut f = [rms, m2, skew, kurt, crest, hi - lo, 0.0, 0.0, 0.0];
    for k in 1..=3 {
        f[5 + k] = dft_amplitude(x, k * rotation_bin);
    }
    Ok(FeatureVector(f))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRegConfig {
    pub lr: f64,
    pub iterations: usize,
    pub l2: f64,
    /// Seeds the small random initial weights.
    pub seed: u64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            lr: 0.5,
            iterations: 2000,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Softmax regression over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRegModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `n_classes x n_features`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LogRegModel {
    pub fn untrained(n_classes: usize, n_features: usize) -> Self {
        LogRegModel {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
            weight: vec![0.0; n_classes * n_features],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..self.n_classes())
            .map(|k| self.bias[k] + self.weight[k * d..(k + 1) * d].iter().zip(z).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    fn standardize(&self, f: &FeatureVector) -> Vec<f64> {
        f.0.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn predict_logprobs(&self, f: &FeatureVector) -> Vec<f64> {
        log_softmax(&self.logits(&self.standardize(f)))
    }

    pub fn to_params(&self) -> Result<ParameterSet<f32>> {
        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let (k, d) = (self.n_classes(), self.mean.len());
        let mut p = ParameterSet::new();
        p.add("lr.weight", Tensor::new(vec![k, d], f32s(&self.weight))?)?;
        p.add("lr.bias", Tensor::new(vec![k], f32s(&self.bias))?)?;
        p.add_with("lr.feat_mean", Tensor::new(vec![d], f32s(&self.mean))?, false)?;
        p.add_with("lr.feat_std", Tensor::new(vec![d], f32s(&self.std))?, false)?;
        Ok(p)
    }

    pub fn from_params(p: &ParameterSet<f32>) -> Result<Self> {
        let get = |n: &str| -> Result<Vec<f64>> {
            Ok(p.get(p.require(n)?).data().iter().map(|&x| x as f64).collect())
        };
        let m = LogRegModel {
            mean: get("lr.feat_mean")?,
            std: get("lr.feat_std")?,
            weight: get("lr.weight")?,
            bias: get("lr.bias")?,
        };
        if m.std.len() != m.mean.len() || m.weight.len() != m.bias.len() * m.mean.len() {
            return Err(Error::shape("logistic regression", "inconsistent tensor sizes".to_string()));
        }
        Ok(m)
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Full-batch gradient descent on the mean cross-entropy plus an L2 penalty.
pub fn train_logreg(
    features: &[FeatureVector],
    labels: &[usize],
    n_classes: usize,
    config: LogRegConfig,
) -> Result<LogRegModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::arg(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::arg(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut present = vec![false; n_classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Training("logistic regression needs at least two classes".into()));
    }

    let (n, d) = (features.len() as f64, N_FEATURES);
    let mut model = LogRegModel::untrained(n_classes, d);
    for j in 0..d {
        let mean = features.iter().map(|f| f.0[j]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f.0[j] - mean).powi(2)).sum::<f64>() / n;
        model.mean[j] = mean;
        model.std[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = features.iter().map(|f| model.standardize(f)).collect();
    let mut r = rng::keyed(&[rng::TAG_INIT, config.seed]);
    model.weight.iter_mut().for_each(|w| *w = r.random_range(-0.01..0.01));

    for _ in 0..config.iterations {
        let mut gw = vec![0.0; n_classes * d];
        let mut gb = vec![0.0; n_classes];
        for (x, &y) in z.iter().zip(labels) {
            let lp = log_softmax(&model.logits(x));
            for k in 0..n_classes {
                let r = lp[k].exp() - if k == y { 1.0 } else { 0.0 };
                gb[k] += r;
                for j in 0..d {
                    gw[k * d + j] += r * x[j];
                }
            }
        }
        for (w, g) in model.weight.iter_mut().zip(&gw) {
            *w -= config.lr * (g / n + config.l2 * *w);
        }
        for (b, g) in model.bias.iter_mut().zip(&gb) {
            *b -= config.lr * g / n;
        }
    }
    if model.weight.iter().chain(&model.bias).any(|v| !v.is_finite()) {
        return Err(Error::Training("logistic regression diverged".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_features() {
        let n = 2000;
        let x: Vec<f32> = (0..n)
            .map(|t| (2.0 * PI * 2.0 * t as f64 / n as f64).sin() as f32 * 3.0)
            .collect();
        let f = extract_classic_features(&x, 1).unwrap().0;
        assert!((f[0] - 3.0 / 2f64.sqrt()).abs() < 1e-5);
        assert!((f[4] - 2f64.sqrt()).abs() < 1e-4);
        assert!((f[3] - 1.5).abs() < 1e-4);
        assert!(f[6] < 1e-4 && (f[7] - 3.0).abs() < 1e-4 && f[8] < 1e-4);
    }

    #[test]
    fn constant_signal_is_finite() {
        let f = extract_classic_features(&[0.0; 2000], 1).unwrap().0;
        assert_eq!(f[4], 1.0);
        assert!(f.iter().all(|v| v.is_finite()));
        let f = extract_classic_features(&[2.5; 100], 1).unwrap().0;
        assert!((f[4] - 1.0).abs() < 1e-12);
    }

    fn blobs() -> (Vec<FeatureVector>, Vec<usize>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            let mut v = [0.0; N_FEATURES];
            v[0] = c as f64 * 2.0 + (i as f64 * 0.37).sin() * 0.3;
            v[6] = -(c as f64) + (i as f64 * 0.71).cos() * 0.3;
            feats.push(FeatureVector(v));
            labels.push(c);
        }
        (feats, labels)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (f, y) = blobs();
        let m = train_logreg(&f, &y, 4, LogRegConfig::default()).unwrap();
        let correct = f
            .iter()
            .zip(&y)
            .filter(|(f, &y)| {
                let lp = m.predict_logprobs(f);
                (0..4).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap() == y
            })
            .count();
        assert_eq!(correct, 60);
        let back = LogRegModel::from_params(&m.to_params().unwrap()).unwrap();
        assert_eq!(back.n_classes(), 4);
    }

    #[test]
    fn gaussian_kurtosis_is_three() {
        let mut r = rng::keyed(&[77]);
        let x: Vec<f32> = (0..10_000).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal) as f32).collect();
        let f = extract_classic_features(&x, 1).unwrap().0;
        assert!((f[3] - 3.0).abs() < 0.1, "kurtosis {}", f[3]);
    }

    #[test]
    fn two_feature_toy_set_within_500_iterations() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let mut v = [0.0; N_FEATURES];
            v[0] = if c == 1 { 1.0 } else { -1.0 } + (i as f64 * 0.9).sin() * 0.4;
            v[1] = (i as f64 * 1.3).cos();
            feats.push(FeatureVector(v));
            labels.push(c);
        }
        let cfg = LogRegConfig { iterations: 500, ..Default::default() };
        let m = train_logreg(&feats, &labels, 4, cfg).unwrap();
        for (f, &y) in feats.iter().zip(&labels) {
            let lp = m.predict_logprobs(f);
            assert_eq!((0..4).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap(), y);
        }
        assert_eq!(m, train_logreg(&feats, &labels, 4, cfg).unwrap());
        let other = train_logreg(&feats, &labels, 4, LogRegConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(m.weight, other.weight);
    }

    #[test]
    fn single_class_is_rejected() {
        let (f, _) = blobs();
        assert!(train_logreg(&f, &vec![1; 60], 4, LogRegConfig::default()).is_err());
    }
}
