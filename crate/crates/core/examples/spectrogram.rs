//! Follows one capture through preprocessing: raw samples, one resampled
//! rotation, and the 3-channel STFT image.
//!
//! cargo run --release --example spectrogram

use axle_crack::dataio::{ConditionVector, DefectClass, Wheelset};
use axle_crack::dsp::{preprocess, signal_image, DspConfig, Stft, Spectrogram};
use axle_crack::rng;
use axle_crack::synthgen::{make_wa_profile, synth_record};

fn channel_rms(img: &Spectrogram, c: usize) -> f64 {
    let s = Spectrogram::SHAPE;
    let mut acc = 0.0;
    for f in 0..s[1] {
        for t in 0..s[2] {
            acc += (img.at(c, f, t) as f64).powi(2);
        }
    }
    (acc / (s[1] * s[2]) as f64).sqrt()
}

fn main() -> axle_crack::Result<()> {
    let profile = make_wa_profile(Wheelset::Wa1, 3);
    let stft = Stft::new(DspConfig::default().stft)?;
    for speed in [0u8, 1] {
        let cond = ConditionVector::new(0, 1, 1, 0, speed)?;
        for defect in [DefectClass::D0, DefectClass::D3] {
            let rec = synth_record(&profile, 1, cond, defect, &mut rng::keyed(&[3, speed as u64]));
            let sig = preprocess(&rec, &DspConfig::default())?;
            let img = signal_image(&stft, &sig.samples)?;
            println!(
                "speed {} km/h, {defect}: {} raw -> {} samples -> {:?}; channel rms re {:.2} im {:.2} mag {:.2}",
                cond.speed_kmh(),
                rec.samples.len(),
                sig.samples.len(),
                Spectrogram::SHAPE,
                channel_rms(&img, 0),
                channel_rms(&img, 1),
                channel_rms(&img, 2)
            );
        }
    }
    Ok(())
}
