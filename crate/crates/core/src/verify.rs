//! Self-checks behind the `check` subcommand: reverse-mode gradients against
//! central differences, and the fast kernels against slow textbook oracles.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use rustfft::num_complex::Complex;

use crate::autodiff::kernels::{conv2d_forward, ConvGeom};
use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Mode, ParameterSet, Tape, Tensor, Var};
use crate::dsp::{zscore_normalize, Stft, StftParams, PROCESSED_LEN};
use crate::error::Result;
use crate::models::{build_model, forward_differential, ArchConfig};
use crate::rng;
use crate::traineval::auc_from_scores;

pub const PRIMITIVE_GRAD_TOL: f64 = 1e-6;
pub const MODEL_GRAD_TOL: f64 = 1e-5;
pub const STFT_TOL: f64 = 1e-5;
pub const CONV_TOL: f64 = 1e-6;
pub const AUC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    /// Largest error observed.
    pub max_err: f64,
    pub tolerance: f64,
    pub cases: usize,
    /// Cases left out because they sat on a kink of the loss.
    pub skipped: usize,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<22} max_err {:.3e} (tol {:.0e}, {} cases{}, {:.1}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_err,
            self.tolerance,
            self.cases,
            if self.skipped > 0 { format!(", {} kinked skipped", self.skipped) } else { String::new() },
            self.seconds
        )
    }
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<(f64, usize)>) -> Result<SuiteResult> {
    let start = Instant::now();
    let (max_err, cases) = f()?;
    Ok(SuiteResult {
        name: name.to_string(),
        max_err,
        tolerance,
        cases,
        skipped: 0,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn random_tensor(r: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Projects any tape value onto 3 fixed logits and scores class 1, giving a
/// scalar loss that depends on every element.
fn project_loss(t: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let n = t.value(y).len();
    let mut r = rng::keyed(&[seed, 0x70]);
    let w = t.input(random_tensor(&mut r, vec![3, n]));
    let b = t.input(random_tensor(&mut r, vec![3]));
    let flat = t.flatten(y);
    let z = t.linear(flat, w, b)?;
    Ok(t.log_softmax_nll(z, 1)?.1)
}

fn primitive_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        coords_per_tensor: 40,
        seed,
        ..GradCheckConfig::default()
    }
}

/// Distinct values at least 0.01 apart in random order, so a 1e-5 nudge can
/// never change which element wins a pooling window.
fn off_tie_tensor(r: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape, v).expect("shape matches data")
}

/// Gradient checks of each primitive in isolation, as `(name, max error)`.
pub fn primitive_gradients(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng::keyed(&[seed, 0x6772]);
    let mut out = Vec::new();

    let mut p = ParameterSet::new();
    p.add("x", random_tensor(&mut r, vec![7]))?;
    p.add("w", random_tensor(&mut r, vec![5, 7]))?;
    p.add("b", random_tensor(&mut r, vec![5]))?;
    let rep = grad_check(
        |t| {
            let (x, w, b) = (t.param_named("x")?, t.param_named("w")?, t.param_named("b")?);
            let y = t.linear(x, w, b)?;
            project_loss(t, y, seed)
        },
        &p,
        primitive_config(seed),
    )?;
    out.push(("dense", rep.max_rel_err));

    let mut p = ParameterSet::new();
    p.add("x", random_tensor(&mut r, vec![3, 6, 5]))?;
    p.add("w", random_tensor(&mut r, vec![4, 3, 2, 2]))?;
    p.add("b", random_tensor(&mut r, vec![4]))?;
    let rep = grad_check(
        |t| {
            let (x, w, b) = (t.param_named("x")?, t.param_named("w")?, t.param_named("b")?);
            let y = t.conv2d_same(x, w, b)?;
            project_loss(t, y, seed)
        },
        &p,
        primitive_config(seed),
    )?;
    out.push(("conv2d", rep.max_rel_err));

    let mut p = ParameterSet::new();
    p.add("x", random_tensor(&mut r, vec![2, 11]))?;
    p.add("w", random_tensor(&mut r, vec![3, 2, 3]))?;
    p.add("b", random_tensor(&mut r, vec![3]))?;
    let rep = grad_check(
        |t| {
            let (x, w, b) = (t.param_named("x")?, t.param_named("w")?, t.param_named("b")?);
            let y = t.conv1d_same(x, w, b)?;
            project_loss(t, y, seed)
        },
        &p,
        primitive_config(seed),
    )?;
    out.push(("conv1d", rep.max_rel_err));

    let mut p = ParameterSet::new();
    p.add("x", off_tie_tensor(&mut r, vec![2, 6, 8]))?;
    p.add("s", off_tie_tensor(&mut r, vec![3, 10]))?;
    let rep = grad_check(
        |t| {
            let x = t.param_named("x")?;
            let s = t.param_named("s")?;
            let a = t.maxpool2(x)?;
            let b = t.maxpool1(s)?;
            let (a, b) = (t.flatten(a), t.flatten(b));
            let y = t.concat(&[a, b]);
            project_loss(t, y, seed)
        },
        &p,
        primitive_config(seed),
    )?;
    out.push(("maxpool", rep.max_rel_err));

    let (n, m) = (4, 3);
    let mut p = ParameterSet::new();
    p.add("x", random_tensor(&mut r, vec![n]))?;
    p.add("h", random_tensor(&mut r, vec![m]))?;
    p.add("c", random_tensor(&mut r, vec![m]))?;
    p.add("w", random_tensor(&mut r, vec![4 * m, n + m]))?;
    p.add("b", random_tensor(&mut r, vec![4 * m]))?;
    let rep = grad_check(
        |t| {
            let x = t.param_named("x")?;
            let (h, c) = (t.param_named("h")?, t.param_named("c")?);
            let (w, b) = (t.param_named("w")?, t.param_named("b")?);
            let (h1, c1) = t.lstm_step(x, h, c, w, b)?;
            let (h2, c2) = t.lstm_step(x, h1, c1, w, b)?;
            let y = t.concat(&[h2, c2]);
            project_loss(t, y, seed)
        },
        &p,
        primitive_config(seed),
    )?;
    out.push(("lstm_step", rep.max_rel_err));

    let mut p = ParameterSet::new();
    p.add("z", random_tensor(&mut r, vec![6]))?;
    let rep = grad_check(
        |t| {
            let z = t.param_named("z")?;
            Ok(t.log_softmax_nll(z, 4)?.1)
        },
        &p,
        primitive_config(seed),
    )?;
    out.push(("log_softmax_nll", rep.max_rel_err));

    Ok(out)
}

/// Gradient check of the full default differential model in 64-bit floats,
/// evaluation mode, on random spectrogram-shaped inputs.
pub fn model_gradient(seed: u64, coords_per_tensor: usize) -> Result<GradCheckReport> {
    let cfg = ArchConfig::default();
    let params = build_model(&cfg, seed)?.params.cast::<f64>();
    let mut r = rng::keyed(&[seed, 0x6d6f]);
    let shape = vec![cfg.image_channels, cfg.image_size, cfg.image_size];
    let a = random_tensor(&mut r, shape.clone());
    let b = random_tensor(&mut r, shape);
    let bits = [1.0, 0.0, 1.0, 0.0, 1.0];
    let rep = grad_check(
        |t| {
            let mut unused = rng::keyed(&[0]);
            let lp = forward_differential(t, &cfg, a.clone(), b.clone(), &bits, Mode::Eval, &mut unused)?;
            t.nll(lp, 2)
        },
        &params,
        GradCheckConfig {
            coords_per_tensor,
            seed,
            skip_kinks: true,
            ..GradCheckConfig::default()
        },
    )?;
    Ok(rep)
}

/// Direct O(N^2) one-sided DFT of every Hann-windowed frame.
pub fn naive_stft(signal: &[f32], params: StftParams) -> Vec<Complex<f64>> {
    let n = params.window;
    let window: Vec<f64> = (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect();
    let twiddle: Vec<Complex<f64>> = (0..n)
        .map(|j| {
            let a = -2.0 * PI * j as f64 / n as f64;
            Complex::new(a.cos(), a.sin())
        })
        .collect();
    let frames = params.n_frames(signal.len());
    let mut out = Vec::with_capacity(frames * params.n_bins());
    for t in 0..frames {
        let seg = &signal[t * params.hop..t * params.hop + n];
        for k in 0..params.n_bins() {
            let mut acc = Complex::new(0.0, 0.0);
            for (j, &x) in seg.iter().enumerate() {
                acc += twiddle[(k * j) % n] * (x as f64 * window[j]);
            }
            out.push(acc);
        }
    }
    out
}

pub fn stft_oracle(seed: u64, signals: usize) -> Result<(f64, usize)> {
    let params = StftParams::default();
    let stft = Stft::new(params)?;
    let mut worst = 0f64;
    for i in 0..signals {
        let mut r = rng::keyed(&[seed, 0x5354, i as u64]);
        let raw: Vec<f32> = (0..PROCESSED_LEN).map(|_| r.random_range(-3.0..3.0)).collect();
        let (x, _) = zscore_normalize(&raw);
        let fast = stft.run(&x)?;
        for (f, s) in fast.data.iter().zip(naive_stft(&x, params)) {
            let d = (f.re as f64 - s.re).abs().max((f.im as f64 - s.im).abs());
            worst = worst.max(d);
        }
    }
    Ok((worst, signals))
}

/// Zero-padded cross-correlation written as plain nested loops; padding is
/// `(k - 1) / 2` before and the remainder after.
pub fn naive_conv2d(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (pt, pl) = ((g.kh as isize - 1) / 2, (g.kw as isize - 1) / 2);
    let mut out = vec![0.0; g.c_out * g.h * g.w];
    for co in 0..g.c_out {
        for y in 0..g.h {
            for xo in 0..g.w {
                let mut acc = b[co];
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let sy = y as isize + ky as isize - pt;
                            let sx = xo as isize + kx as isize - pl;
                            if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                continue;
                            }
                            acc += w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx]
                                * x[(ci * g.h + sy as usize) * g.w + sx as usize];
                        }
                    }
                }
                out[(co * g.h + y) * g.w + xo] = acc;
            }
        }
    }
    out
}

/// Same as [`naive_conv2d`] on `C x L` signals with `C_out x C_in x k` weights.
pub fn naive_conv1d(c_in: usize, c_out: usize, len: usize, k: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let pad = (k as isize - 1) / 2;
    let mut out = vec![0.0; c_out * len];
    for co in 0..c_out {
        for i in 0..len {
            let mut acc = b[co];
            for ci in 0..c_in {
                for j in 0..k {
                    let s = i as isize + j as isize - pad;
                    if s >= 0 && (s as usize) < len {
                        acc += w[(co * c_in + ci) * k + j] * x[ci * len + s as usize];
                    }
                }
            }
            out[co * len + i] = acc;
        }
    }
    out
}

fn uniform_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn conv_oracle(seed: u64, shapes: usize) -> Result<(f64, usize)> {
    let mut worst = 0f64;
    for i in 0..shapes {
        let mut r = rng::keyed(&[seed, 0x434f, i as u64]);
        let g = ConvGeom {
            c_in: r.random_range(1..=4),
            c_out: r.random_range(1..=4),
            h: r.random_range(1..=12),
            w: r.random_range(1..=12),
            kh: r.random_range(1..=4),
            kw: r.random_range(1..=4),
        };
        let x = uniform_vec(&mut r, g.c_in * g.h * g.w);
        let w = uniform_vec(&mut r, g.c_out * g.c_in * g.kh * g.kw);
        let b = uniform_vec(&mut r, g.c_out);
        for (a, o) in conv2d_forward(&g, &x, &w, &b).iter().zip(naive_conv2d(&g, &x, &w, &b)) {
            worst = worst.max((a - o).abs());
        }

        let (ci, co, len, k) = (g.c_in, g.c_out, r.random_range(1..=20), 2 * r.random_range(0..=2) + 1);
        let x = uniform_vec(&mut r, ci * len);
        let w = uniform_vec(&mut r, co * ci * k);
        let b = uniform_vec(&mut r, co);
        let params = ParameterSet::new();
        let mut t = Tape::new(&params);
        let (xv, wv, bv) = (
            t.input(Tensor::new(vec![ci, len], x.clone())?),
            t.input(Tensor::new(vec![co, ci, k], w.clone())?),
            t.input(Tensor::vector(b.clone())),
        );
        let y = t.conv1d_same(xv, wv, bv)?;
        for (a, o) in t.value(y).data().iter().zip(naive_conv1d(ci, co, len, k, &x, &w, &b)) {
            worst = worst.max((a - o).abs());
        }
    }
    Ok((worst, shapes))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}

pub fn auc_oracle(seed: u64, instances: usize) -> Result<(f64, usize)> {
    let mut worst = 0f64;
    for i in 0..instances {
        let mut r = rng::keyed(&[seed, 0x4155, i as u64]);
        let n = r.random_range(2..=50);
        let levels = r.random_range(2..=12);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let fast = auc_from_scores(&scores, &labels)?;
        worst = worst.max((fast - pair_count_auc(&scores, &labels)).abs());
    }
    Ok((worst, instances))
}

/// Runs every suite in a fixed order.
pub fn run_checks(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    let start = Instant::now();
    for (name, err) in primitive_gradients(seed)? {
        out.push(SuiteResult {
            name: format!("grad {name}"),
            max_err: err,
            tolerance: PRIMITIVE_GRAD_TOL,
            cases: 1,
            skipped: 0,
            seconds: 0.0,
        });
    }
    let prim = start.elapsed().as_secs_f64() / out.len() as f64;
    out.iter_mut().for_each(|s| s.seconds = prim);
    let start = Instant::now();
    let rep = model_gradient(seed, 12)?;
    out.push(SuiteResult {
        name: "grad full model".into(),
        max_err: rep.max_rel_err,
        tolerance: MODEL_GRAD_TOL,
        cases: rep.coords_checked,
        skipped: rep.kinks_skipped,
        seconds: start.elapsed().as_secs_f64(),
    });
    out.push(timed("stft vs naive dft", STFT_TOL, || stft_oracle(seed, 20))?);
    out.push(timed("conv vs nested loops", CONV_TOL, || conv_oracle(seed, 50))?);
    out.push(timed("auc vs pair count", AUC_TOL, || auc_oracle(seed, 200))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for (name, err) in primitive_gradients(3).unwrap() {
            assert!(err < PRIMITIVE_GRAD_TOL, "{name}: {err:e}");
        }
    }

    #[test]
    fn naive_dft_of_a_cosine() {
        let params = StftParams { window: 16, hop: 16 };
        let x: Vec<f32> = (0..16).map(|i| (2.0 * PI * 4.0 * i as f64 / 16.0).cos() as f32).collect();
        let out = naive_stft(&x, params);
        assert_eq!(out.len(), 9);
        // Hann spreads bin 4 over 3..=5 with weights 1/4, 1/2, 1/4 of N/2.
        assert!((out[4].re - 4.0).abs() < 1e-9, "{:?}", out[4]);
        assert!((out[3].re + 2.0).abs() < 1e-9 && (out[5].re + 2.0).abs() < 1e-9);
        assert!(out[0].norm() < 1e-9 && out[8].norm() < 1e-9);
    }

    #[test]
    fn naive_conv_hand_example() {
        let g = ConvGeom { c_in: 1, c_out: 1, h: 2, w: 2, kh: 2, kw: 2 };
        let out = naive_conv2d(&g, &[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], &[0.5]);
        assert_eq!(out, vec![5.5, 2.5, 3.5, 4.5]);
        let out = naive_conv1d(1, 1, 3, 3, &[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[0.0]);
        assert_eq!(out, vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn pair_count_hand_example() {
        let s = [0.9, 0.5, 0.5, 0.1];
        let l = [true, true, false, false];
        assert_eq!(pair_count_auc(&s, &l), 3.5 / 4.0);
    }

    #[test]
    fn oracle_suites_pass_small() {
        assert!(stft_oracle(1, 2).unwrap().0 < STFT_TOL);
        assert!(conv_oracle(1, 10).unwrap().0 < CONV_TOL);
        assert!(auc_oracle(1, 30).unwrap().0 < AUC_TOL);
    }
}
