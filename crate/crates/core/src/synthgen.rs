//! Synthetic cracked-rotor corpus.
//!
//! Each wheelset gets a [`WAProfile`]: structural resonances, a healthy
//! residual harmonic level for every test-condition combination, crack
//! harmonic gains and a noise floor. A capture is
//!
//! ```text
//! s(t) = G_ch * L * [ sum_k (r_k + a_k (d/15)^p_k) sin(k (2 pi f_r t + theta) + psi_k)
//!                     + sum_j g_j sin(2 pi f_j t + phi_j) ]  +  N(0, sigma^2)
//! ```
//!
//! where `d` is the crack depth, `f_r` the wheel rotation frequency, `L` the
//! load factor and `G_ch` the sensor channel gain. The healthy residual `r_k`
//! differs between condition cells and between wheelsets; only a healthy
//! reference from the same cell reveals it. All constants here are synthetic.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataio::{
    ConditionVector, Dataset, DefectClass, VibrationRecord, Wheelset, N_COMBINATIONS, RAW_SAMPLE_COUNT,
    RAW_SAMPLE_RATE,
};
use crate::dsp::{rotation_frequency_hz, DEFAULT_WHEEL_DIAMETER_M};
use crate::error::{Error, Result};
use crate::rng;

pub const N_HARMONICS: usize = 3;
pub const NYQUIST_HZ: f64 = RAW_SAMPLE_RATE as f64 / 2.0;
pub const HIGH_LOAD_FACTOR: f64 = 1.3;
/// Relative per-capture jitter of the healthy residual harmonics.
pub const RESIDUAL_JITTER: f64 = 0.05;
/// Healthy residual harmonic range shared by every wheelset.
pub const RESIDUAL_AMP_RANGE: (f64, f64) = (0.1, 1.0);
/// Noise floor shared by every wheelset. Equal floors keep z-score
/// normalisation from rescaling the crack signature differently per
/// wheelset.
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.5, 0.5);
/// Relative per-capture jitter of the resonance gains.
pub const RESONANCE_JITTER: f64 = 0.1;

/// Per-wheelset record counts for D0..D3 at scale 1.
pub const DEFAULT_COUNTS: [[usize; 4]; 3] = [
    [4762, 2323, 2940, 2930],
    [5220, 5203, 5551, 4783],
    [2996, 3001, 3292, 2106],
];

#[derive(Clone, Debug, PartialEq)]
pub struct WAProfile {
    pub wheelset: Wheelset,
    pub wheel_diameter_m: f64,
    pub resonance_freqs: Vec<f64>,
    pub resonance_gains: Vec<f64>,
    /// Crack harmonic gain `a_k` at full depth.
    pub harmonic_base_amps: [f64; N_HARMONICS],
    pub harmonic_exponents: [f64; N_HARMONICS],
    /// Phase offset of each harmonic relative to the wheel angle.
    pub harmonic_phases: [f64; N_HARMONICS],
    /// Healthy residual harmonic amplitude per condition combination.
    pub residual_amps: Vec<[f64; N_HARMONICS]>,
    pub noise_floor_sigma: f64,
    /// Indexed by `2 * place + orientation`.
    pub channel_gain: [f64; 4],
}

impl WAProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = self
            .resonance_gains
            .iter()
            .chain(&self.harmonic_base_amps)
            .chain(&self.harmonic_exponents)
            .chain(&self.channel_gain)
            .chain(std::iter::once(&self.wheel_diameter_m))
            .all(|&v| v > 0.0 && v.is_finite());
        if !positive || !(self.noise_floor_sigma >= 0.0) {
            return Err(Error::arg(format!("{}: gains must be positive", self.wheelset)));
        }
        if self.resonance_freqs.len() != self.resonance_gains.len() {
            return Err(Error::arg("resonance frequency/gain count mismatch"));
        }
        if self.resonance_freqs.iter().any(|&f| !(f > 0.0 && f < NYQUIST_HZ)) {
            return Err(Error::arg(format!("{}: resonance above Nyquist", self.wheelset)));
        }
        if self.residual_amps.len() != N_COMBINATIONS {
            return Err(Error::arg("residual amplitudes must cover all 32 combinations"));
        }
        Ok(())
    }

    /// Crack contribution `a_k (d/15)^p_k` to harmonic `k` (1-based).
    pub fn crack_amplitude(&self, k: usize, defect: DefectClass) -> f64 {
        let depth = defect.depth_mm();
        if depth == 0.0 {
            return 0.0;
        }
        self.harmonic_base_amps[k - 1] * (depth / DefectClass::MAX_DEPTH_MM).powf(self.harmonic_exponents[k - 1])
    }

    pub fn rotation_frequency_hz(&self, conditions: ConditionVector) -> f64 {
        rotation_frequency_hz(conditions.speed_kmh(), self.wheel_diameter_m)
    }
}

/// Uniform sampling ranges for one wheelset's profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileRanges {
    pub resonance_freq_hz: (f64, f64),
    pub resonance_gain: (f64, f64),
    pub crack_amp: (f64, f64),
    pub residual_amp: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub channel_gain: (f64, f64),
}

impl ProfileRanges {
    /// Defaults; WA2 and WA3 resonances and crack gains are shifted away
    /// from WA1. Residual and noise ranges are common to all wheelsets.
    pub fn default_for(wa: Wheelset) -> Self {
        match wa {
            Wheelset::Wa1 => ProfileRanges {
                resonance_freq_hz: (300.0, 1500.0),
                resonance_gain: (0.3, 0.6),
                crack_amp: (0.55, 0.7),
                residual_amp: RESIDUAL_AMP_RANGE,
                noise_sigma: NOISE_SIGMA_RANGE,
                channel_gain: (0.7, 1.3),
            },
            Wheelset::Wa2 => ProfileRanges {
                resonance_freq_hz: (400.0, 1700.0),
                resonance_gain: (0.4, 0.8),
                crack_amp: (0.5, 0.7),
                residual_amp: RESIDUAL_AMP_RANGE,
                noise_sigma: NOISE_SIGMA_RANGE,
                channel_gain: (0.7, 1.3),
            },
            Wheelset::Wa3 => ProfileRanges {
                resonance_freq_hz: (500.0, 1850.0),
                resonance_gain: (0.5, 1.0),
                crack_amp: (0.45, 0.7),
                residual_amp: RESIDUAL_AMP_RANGE,
                noise_sigma: NOISE_SIGMA_RANGE,
                channel_gain: (0.7, 1.3),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            ("resonance_freq_hz", self.resonance_freq_hz),
            ("resonance_gain", self.resonance_gain),
            ("crack_amp", self.crack_amp),
            ("residual_amp", self.residual_amp),
            ("noise_sigma", self.noise_sigma),
            ("channel_gain", self.channel_gain),
        ];
        for (name, (lo, hi)) in all {
            if !(lo <= hi) || lo < 0.0 {
                return Err(Error::arg(format!("range {name} = ({lo}, {hi}) is invalid")));
            }
        }
        if self.resonance_freq_hz.1 >= NYQUIST_HZ {
            return Err(Error::arg("resonance range must stay below Nyquist"));
        }
        Ok(())
    }
}

/// Generator knobs shared by all wheelsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub wheel_diameter_m: f64,
    /// Overrides every profile's noise floor when set.
    pub noise_sigma: Option<f64>,
    pub harmonic_exponents: [f64; N_HARMONICS],
    pub ranges: [ProfileRanges; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            wheel_diameter_m: DEFAULT_WHEEL_DIAMETER_M,
            noise_sigma: None,
            harmonic_exponents: [1.0; N_HARMONICS],
            ranges: Wheelset::ALL.map(ProfileRanges::default_for),
        }
    }
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        r.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn make_wa_profile(wa: Wheelset, master_seed: u64) -> WAProfile {
    make_wa_profile_with(wa, master_seed, &SynthConfig::default())
        .expect("default synthesis ranges are valid")
}

pub fn make_wa_profile_with(wa: Wheelset, master_seed: u64, config: &SynthConfig) -> Result<WAProfile> {
    let ranges = &config.ranges[wa.index()];
    ranges.validate()?;
    let mut r = rng::keyed(&[rng::TAG_PROFILE, master_seed, wa.index() as u64]);

    let n_res = r.random_range(2..=4);
    let mut resonance_freqs: Vec<f64> = (0..n_res).map(|_| uniform(&mut r, ranges.resonance_freq_hz)).collect();
    resonance_freqs.sort_by(f64::total_cmp);
    let resonance_gains = (0..n_res).map(|_| uniform(&mut r, ranges.resonance_gain)).collect();
    let harmonic_base_amps = [(); N_HARMONICS].map(|_| uniform(&mut r, ranges.crack_amp));
    let harmonic_phases = [(); N_HARMONICS].map(|_| r.random_range(0.0..2.0 * PI));
    let residual_amps = (0..N_COMBINATIONS)
        .map(|_| [(); N_HARMONICS].map(|_| uniform(&mut r, ranges.residual_amp)))
        .collect();
    let sigma = uniform(&mut r, ranges.noise_sigma);
    let channel_gain = [(); 4].map(|_| uniform(&mut r, ranges.channel_gain));

    let profile = WAProfile {
        wheelset: wa,
        wheel_diameter_m: config.wheel_diameter_m,
        resonance_freqs,
        resonance_gains,
        harmonic_base_amps,
        harmonic_exponents: config.harmonic_exponents,
        harmonic_phases,
        residual_amps,
        noise_floor_sigma: config.noise_sigma.unwrap_or(sigma),
        channel_gain,
    };
    profile.validate()?;
    Ok(profile)
}

/// Adds `amp * sin(omega * n + phase)` for `n = 0..out.len()` using a
/// rotating phasor.
fn add_tone(out: &mut [f64], amp: f64, omega: f64, phase: f64) {
    let (step_im, step_re) = omega.sin_cos();
    let (mut im, mut re) = phase.sin_cos();
    for (n, x) in out.iter_mut().enumerate() {
        *x += amp * im;
        let next_re = re * step_re - im * step_im;
        im = re * step_im + im * step_re;
        re = next_re;
        // renormalise now and then so rounding does not drift the amplitude
        if n % 1024 == 1023 {
            let norm = (re * re + im * im).sqrt();
            re /= norm;
            im /= norm;
        }
    }
}

/// One 16384-sample capture at 12.8 kHz.
pub fn synth_signal(
    profile: &WAProfile,
    conditions: ConditionVector,
    defect: DefectClass,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let fs = RAW_SAMPLE_RATE as f64;
    let f_r = profile.rotation_frequency_hz(conditions);
    let load = if conditions.load == 1 { HIGH_LOAD_FACTOR } else { 1.0 };
    let gain = profile.channel_gain[2 * conditions.place as usize + conditions.orientation as usize];
    let direction = if conditions.rotation == 1 { 1.0 } else { -1.0 };
    let residual = profile.residual_amps[conditions.index()];

    let mut acc = vec![0f64; RAW_SAMPLE_COUNT];
    let wheel_angle = rng.random_range(0.0..2.0 * PI);
    for k in 1..=N_HARMONICS {
        let jitter: f64 = rng.sample(StandardNormal);
        let healthy = residual[k - 1] * (1.0 + RESIDUAL_JITTER * jitter);
        let amp = healthy + profile.crack_amplitude(k, defect);
        let phase = k as f64 * wheel_angle + direction * profile.harmonic_phases[k - 1];
        add_tone(&mut acc, amp, 2.0 * PI * k as f64 * f_r / fs, phase);
    }
    for (&f, &g) in profile.resonance_freqs.iter().zip(&profile.resonance_gains) {
        let jitter: f64 = rng.sample(StandardNormal);
        let phase = rng.random_range(0.0..2.0 * PI);
        add_tone(&mut acc, g * (1.0 + RESONANCE_JITTER * jitter), 2.0 * PI * f / fs, phase);
    }

    let sigma = profile.noise_floor_sigma;
    acc.iter()
        .map(|&x| {
            let noise: f64 = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            (gain * load * x + noise) as f32
        })
        .collect()
}

pub fn synth_record(
    profile: &WAProfile,
    id: u64,
    conditions: ConditionVector,
    defect: DefectClass,
    rng: &mut impl Rng,
) -> VibrationRecord {
    VibrationRecord {
        id,
        wheelset: profile.wheelset,
        conditions,
        defect,
        sample_rate: RAW_SAMPLE_RATE,
        samples: synth_signal(profile, conditions, defect, rng),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    /// Per wheelset, records of D0..D3 at scale 1.
    pub counts: [[usize; 4]; 3],
    pub scale: f64,
    pub master_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            counts: DEFAULT_COUNTS,
            scale: 1.0,
            master_seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn new(scale: f64, master_seed: u64) -> Self {
        CorpusSpec {
            scale,
            master_seed,
            ..Default::default()
        }
    }

    /// `round(count * scale)` per (wheelset, defect) cell.
    pub fn scaled_counts(&self) -> Result<[[usize; 4]; 3]> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::arg(format!("scale must lie in (0, 1], got {}", self.scale)));
        }
        let mut out = [[0usize; 4]; 3];
        for (w, row) in self.counts.iter().enumerate() {
            for (d, &c) in row.iter().enumerate() {
                let n = (c as f64 * self.scale).round() as usize;
                if n < 1 {
                    return Err(Error::arg(format!(
                        "{} {} rounds to zero records at scale {}",
                        Wheelset::ALL[w],
                        DefectClass::ALL[d],
                        self.scale
                    )));
                }
                out[w][d] = n;
            }
        }
        Ok(out)
    }
}

/// Generates the whole corpus. Record ids run consecutively over
/// (wheelset, defect, index); condition vectors cycle through the 32
/// combinations within each (wheelset, defect) cell.
pub fn synth_corpus(spec: &CorpusSpec, config: &SynthConfig) -> Result<Dataset> {
    let counts = spec.scaled_counts()?;
    let profiles = Wheelset::ALL
        .iter()
        .map(|&wa| make_wa_profile_with(wa, spec.master_seed, config))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    let mut id = 0u64;
    for wa in Wheelset::ALL {
        let mut local = 0u64;
        for defect in DefectClass::ALL {
            for i in 0..counts[wa.index()][defect.index()] {
                jobs.push((id, local, wa, defect, ConditionVector::from_index(i % N_COMBINATIONS)));
                id += 1;
                local += 1;
            }
        }
    }

    let records = jobs
        .into_par_iter()
        .map(|(id, local, wa, defect, conditions)| {
            let mut r = rng::keyed(&[rng::TAG_RECORD, spec.master_seed, wa.index() as u64, local]);
            synth_record(&profiles[wa.index()], id, conditions, defect, &mut r)
        })
        .collect();
    Dataset::new(records, format!("synthetic master_seed={} scale={}", spec.master_seed, spec.scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_profile() -> WAProfile {
        let mut p = make_wa_profile(Wheelset::Wa1, 3);
        p.noise_floor_sigma = 0.0;
        p.resonance_gains.iter_mut().for_each(|g| *g = 1e-9);
        p.residual_amps = vec![[0.0; 3]; N_COMBINATIONS];
        p
    }

    /// Naive single-bin DFT magnitude.
    fn dft_mag(x: &[f32], bin: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in x.iter().enumerate() {
            let a = -2.0 * PI * bin as f64 * t as f64 / n;
            re += v as f64 * a.cos();
            im += v as f64 * a.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn profiles_are_deterministic_and_keyed() {
        for wa in Wheelset::ALL {
            let p = make_wa_profile(wa, 17);
            assert_eq!(p, make_wa_profile(wa, 17));
            assert!(p.resonance_freqs.iter().all(|&f| f < 6400.0));
            assert!((2..=4).contains(&p.resonance_freqs.len()));
        }
        let a = make_wa_profile(Wheelset::Wa1, 17);
        let b = make_wa_profile(Wheelset::Wa2, 17);
        assert_ne!(a.resonance_gains, b.resonance_gains);
    }

    #[test]
    fn healthy_has_no_crack_term() {
        let p = make_wa_profile(Wheelset::Wa2, 1);
        for k in 1..=3 {
            assert_eq!(p.crack_amplitude(k, DefectClass::D0), 0.0);
        }
    }

    #[test]
    fn crack_ratio_follows_power_law() {
        let mut p = make_wa_profile(Wheelset::Wa1, 5);
        p.harmonic_exponents = [1.0, 1.7, 0.5];
        let ratio = p.crack_amplitude(2, DefectClass::D3) / p.crack_amplitude(2, DefectClass::D1);
        assert!((ratio - (15.0f64 / 5.7).powf(1.7)).abs() < 1e-12);
    }

    #[test]
    fn first_harmonic_peaks_at_rotation_bin() {
        let mut p = quiet_profile();
        p.harmonic_base_amps = [1.0, 1e-12, 1e-12];
        let c = ConditionVector::new(0, 0, 0, 0, 1).unwrap();
        let x = synth_signal(&p, c, DefectClass::D3, &mut rng::keyed(&[0]));
        let bin_hz = RAW_SAMPLE_RATE as f64 / x.len() as f64;
        let expected = (p.rotation_frequency_hz(c) / bin_hz).round() as usize;
        let peak = (0..200).max_by(|&a, &b| dft_mag(&x, a).total_cmp(&dft_mag(&x, b))).unwrap();
        assert_eq!(peak, expected);
    }

    #[test]
    fn second_harmonic_grows_with_depth() {
        let p = quiet_profile();
        let c = ConditionVector::new(1, 0, 1, 0, 1).unwrap();
        let bin_hz = RAW_SAMPLE_RATE as f64 / RAW_SAMPLE_COUNT as f64;
        let bin = (2.0 * p.rotation_frequency_hz(c) / bin_hz).round() as usize;
        let mags: Vec<f64> = [DefectClass::D1, DefectClass::D2, DefectClass::D3]
            .iter()
            .map(|&d| dft_mag(&synth_signal(&p, c, d, &mut rng::keyed(&[4])), bin))
            .collect();
        assert!(mags[0] < mags[1] && mags[1] < mags[2], "{mags:?}");
    }

    #[test]
    fn corpus_counts() {
        let spec = CorpusSpec::new(1.0, 0);
        assert_eq!(spec.scaled_counts().unwrap()[0], [4762, 2323, 2940, 2930]);
        let spec = CorpusSpec::new(0.1, 0);
        assert_eq!(spec.scaled_counts().unwrap()[0][0], 476);
        assert!(CorpusSpec::new(0.0, 0).scaled_counts().is_err());
        assert!(CorpusSpec::new(1e-5, 0).scaled_counts().is_err());
    }

    #[test]
    fn small_corpus_is_deterministic() {
        let spec = CorpusSpec {
            counts: [[40, 3, 3, 3], [33, 2, 2, 2], [32, 1, 1, 1]],
            scale: 1.0,
            master_seed: 9,
        };
        let a = synth_corpus(&spec, &SynthConfig::default()).unwrap();
        let b = synth_corpus(&spec, &SynthConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40 + 9 + 33 + 6 + 32 + 3);
        for r in &a.records {
            r.validate_raw().unwrap();
        }
        let wa1_d0: Vec<_> = a
            .records
            .iter()
            .filter(|r| r.wheelset == Wheelset::Wa1 && r.defect == DefectClass::D0)
            .collect();
        assert_eq!(wa1_d0[33].conditions, ConditionVector::from_index(1));
    }
}
