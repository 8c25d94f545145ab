//! Signal preprocessing: one-rotation truncation, resampling, normalisation
//! and the three-channel STFT image fed to the 2-D networks.

use std::borrow::Borrow;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::dataio::{ConditionVector, DefectClass, VibrationRecord, Wheelset};
use crate::error::{Error, Result};

pub const PROCESSED_LEN: usize = 2000;
pub const SPEC_CHANNELS: usize = 3;
pub const SPEC_SIZE: usize = 128;
pub const DEFAULT_WHEEL_DIAMETER_M: f64 = 0.92;

/// Samples covering one wheel revolution: `round(pi * d / v * fs)`.
pub fn rotation_samples(speed_kmh: f64, wheel_diameter_m: f64, fs_hz: f64) -> Result<usize> {
    for (name, v) in [("speed", speed_kmh), ("wheel diameter", wheel_diameter_m), ("sample rate", fs_hz)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::arg(format!("{name} must be positive, got {v}")));
        }
    }
    let period_s = PI * wheel_diameter_m / (speed_kmh / 3.6);
    Ok((period_s * fs_hz).round() as usize)
}

/// Rotation frequency in Hz for a given train speed and wheel diameter.
pub fn rotation_frequency_hz(speed_kmh: f64, wheel_diameter_m: f64) -> f64 {
    (speed_kmh / 3.6) / (PI * wheel_diameter_m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResampleMode {
    /// Linear interpolation at `i * (N - 1) / (n - 1)`.
    #[default]
    Linear,
    /// Nearest-sample pick at the same positions.
    Decimate,
}

impl ResampleMode {
    pub fn name(self) -> &'static str {
        match self {
            ResampleMode::Linear => "linear",
            ResampleMode::Decimate => "decimate",
        }
    }
}

impl std::str::FromStr for ResampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ResampleMode::Linear),
            "decimate" => Ok(ResampleMode::Decimate),
            other => Err(Error::arg(format!("unknown resample mode {other:?}"))),
        }
    }
}

pub fn resample_to(samples: &[f32], n: usize) -> Result<Vec<f32>> {
    resample_with(samples, n, ResampleMode::Linear)
}

pub fn resample_with(samples: &[f32], n: usize, mode: ResampleMode) -> Result<Vec<f32>> {
    let len = samples.len();
    if len < 2 {
        return Err(Error::arg(format!("resampling needs at least 2 input samples, got {len}")));
    }
    if n < 2 {
        return Err(Error::arg(format!("resampling target must be at least 2, got {n}")));
    }
    if n == len {
        return Ok(samples.to_vec());
    }
    let step = (len - 1) as f64 / (n - 1) as f64;
    let out = (0..n)
        .map(|i| {
            let pos = i as f64 * step;
            match mode {
                ResampleMode::Decimate => samples[(pos.round() as usize).min(len - 1)],
                ResampleMode::Linear => {
                    let lo = (pos.floor() as usize).min(len - 2);
                    let frac = pos - lo as f64;
                    let a = samples[lo] as f64;
                    let b = samples[lo + 1] as f64;
                    (a + (b - a) * frac) as f32
                }
            }
        })
        .collect();
    Ok(out)
}

/// Per-signal z-score with population standard deviation. Returns zeros and
/// `true` for a (numerically) constant signal.
pub fn zscore_normalize(samples: &[f32]) -> (Vec<f32>, bool) {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = samples.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return (vec![0.0; samples.len()], true);
    }
    (samples.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect(), false)
}

/// Periodic Hann window, `w[k] = 0.5 (1 - cos(2 pi k / n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::arg(format!("window length must be at least 2, got {n}")));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftParams {
    pub window: usize,
    pub hop: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams { window: 256, hop: 16 }
    }
}

impl StftParams {
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }
}

/// One-sided STFT output, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StftFrames {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<Complex<f32>>,
}

impl StftFrames {
    pub fn frame(&self, t: usize) -> &[Complex<f32>] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Reusable STFT plan (window + FFT).
pub struct Stft {
    params: StftParams,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(params: StftParams) -> Result<Self> {
        if params.hop == 0 {
            return Err(Error::arg("STFT hop must be positive"));
        }
        let window = hann_window(params.window)?;
        let fft = FftPlanner::new().plan_fft_forward(params.window);
        Ok(Stft { params, window, fft })
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    pub fn run(&self, signal: &[f32]) -> Result<StftFrames> {
        let StftParams { window: win, hop } = self.params;
        if signal.len() < win {
            return Err(Error::arg(format!(
                "signal of length {} is shorter than the {win}-sample window",
                signal.len()
            )));
        }
        let n_frames = self.params.n_frames(signal.len());
        let n_bins = self.params.n_bins();
        let mut data = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex::new(0.0f64, 0.0); win];
        let mut scratch = vec![Complex::new(0.0f64, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let seg = &signal[t * hop..t * hop + win];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(x as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend(buf[..n_bins].iter().map(|c| Complex::new(c.re as f32, c.im as f32)));
        }
        Ok(StftFrames {
            n_frames,
            n_bins,
            data,
        })
    }
}

pub fn stft(signal: &[f32], params: StftParams) -> Result<StftFrames> {
    Stft::new(params)?.run(signal)
}

/// Per-channel divisors applied to spectrogram images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelScales(pub [f32; SPEC_CHANNELS]);

impl Default for ChannelScales {
    fn default() -> Self {
        ChannelScales([1.0; SPEC_CHANNELS])
    }
}

impl ChannelScales {
    /// Population standard deviation of each channel over every pixel of the
    /// given (unscaled) images. Degenerate channels keep a unit divisor.
    pub fn from_images<S: Borrow<Spectrogram>>(images: impl IntoIterator<Item = S>) -> Self {
        let mut sum = [0f64; SPEC_CHANNELS];
        let mut sq = [0f64; SPEC_CHANNELS];
        let mut count = 0f64;
        let plane = SPEC_SIZE * SPEC_SIZE;
        for img in images {
            let img = img.borrow();
            for c in 0..SPEC_CHANNELS {
                for &x in &img.data[c * plane..(c + 1) * plane] {
                    sum[c] += x as f64;
                    sq[c] += (x as f64) * (x as f64);
                }
            }
            count += plane as f64;
        }
        let mut out = [1.0f32; SPEC_CHANNELS];
        if count > 0.0 {
            for c in 0..SPEC_CHANNELS {
                let mean = sum[c] / count;
                let std = (sq[c] / count - mean * mean).max(0.0).sqrt();
                if std > 1e-12 {
                    out[c] = std as f32;
                }
            }
        }
        ChannelScales(out)
    }
}

/// A `3 x 128 x 128` image laid out `[channel][frequency][time]`, channels
/// (real, imaginary, magnitude).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub const SHAPE: [usize; 3] = [SPEC_CHANNELS, SPEC_SIZE, SPEC_SIZE];

    pub fn at(&self, c: usize, f: usize, t: usize) -> f32 {
        self.data[(c * SPEC_SIZE + f) * SPEC_SIZE + t]
    }

    pub fn scaled(&self, scales: &ChannelScales) -> Spectrogram {
        let plane = SPEC_SIZE * SPEC_SIZE;
        let mut data = self.data.clone();
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            let s = scales.0[c];
            chunk.iter_mut().for_each(|x| *x /= s);
        }
        Spectrogram { data }
    }
}

/// Builds the image from STFT frames: the Nyquist bin is dropped and time is
/// zero-padded up to 128 columns.
pub fn spectrogram_image(frames: &StftFrames, scales: &ChannelScales) -> Result<Spectrogram> {
    if frames.n_bins != SPEC_SIZE + 1 || frames.n_frames > SPEC_SIZE || frames.n_frames == 0 {
        return Err(Error::shape(
            "spectrogram_image",
            format!(
                "expected {} bins and 1..={SPEC_SIZE} frames, got {} bins x {} frames",
                SPEC_SIZE + 1,
                frames.n_bins,
                frames.n_frames
            ),
        ));
    }
    let plane = SPEC_SIZE * SPEC_SIZE;
    let mut data = vec![0f32; SPEC_CHANNELS * plane];
    for t in 0..frames.n_frames {
        for (f, c) in frames.frame(t)[..SPEC_SIZE].iter().enumerate() {
            let px = f * SPEC_SIZE + t;
            data[px] = c.re / scales.0[0];
            data[plane + px] = c.im / scales.0[1];
            data[2 * plane + px] = c.re.hypot(c.im) / scales.0[2];
        }
    }
    Ok(Spectrogram { data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedSignal {
    pub id: u64,
    pub wheelset: Wheelset,
    pub conditions: ConditionVector,
    pub defect: DefectClass,
    pub samples: Vec<f32>,
    pub constant: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DspConfig {
    pub wheel_diameter_m: f64,
    pub resample_mode: ResampleMode,
    pub stft: StftParams,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            wheel_diameter_m: DEFAULT_WHEEL_DIAMETER_M,
            resample_mode: ResampleMode::Linear,
            stft: StftParams::default(),
        }
    }
}

/// Raw capture to a normalised one-rotation signal of 2000 points.
///
/// Records whose payload already has 2000 samples are treated as processed
/// and only re-normalised.
pub fn preprocess(record: &VibrationRecord, config: &DspConfig) -> Result<ProcessedSignal> {
    let resampled = if record.samples.len() == PROCESSED_LEN {
        record.samples.clone()
    } else {
        let n = rotation_samples(
            record.conditions.speed_kmh(),
            config.wheel_diameter_m,
            record.sample_rate as f64,
        )?;
        if n > record.samples.len() {
            return Err(Error::arg(format!(
                "record {}: one rotation needs {n} samples but only {} are present",
                record.id,
                record.samples.len()
            )));
        }
        resample_with(&record.samples[..n], PROCESSED_LEN, config.resample_mode)?
    };
    let (samples, constant) = zscore_normalize(&resampled);
    Ok(ProcessedSignal {
        id: record.id,
        wheelset: record.wheelset,
        conditions: record.conditions,
        defect: record.defect,
        samples,
        constant,
    })
}

/// Unscaled spectrogram of a processed signal.
pub fn signal_image(stft: &Stft, signal: &[f32]) -> Result<Spectrogram> {
    spectrogram_image(&stft.run(signal)?, &ChannelScales::default())
}
