use rand::seq::index;

use super::{ParamId, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates probed per parameter tensor (all of them if fewer).
    pub coords_per_tensor: usize,
    /// Gradients smaller than this are compared against the floor instead of
    /// their own magnitude.
    pub floor: f64,
    pub seed: u64,
    /// Skip coordinates whose `+-eps` probes change the ReLU/max-pool
    /// activation pattern, where the loss has a kink inside the stencil and
    /// the central difference is not a derivative estimate. Replacement
    /// coordinates are drawn until the quota is met or the tensor runs out.
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            coords_per_tensor: 50,
            floor: 1e-4,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub kinks_skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Loss value and activation pattern.
fn eval_loss<F>(f: &F, params: &ParameterSet<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Graph(format!("loss is not finite ({v})")));
    }
    Ok((v, tape.activation_pattern()))
}

/// Compares reverse-mode gradients with central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps` on a sample of coordinates of every
/// trainable tensor. `forward` must record a scalar loss on the given tape.
pub fn grad_check<F>(forward: F, params: &ParameterSet<f64>, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let (analytic, pattern) = {
        let mut tape = Tape::new(params);
        let loss = forward(&mut tape)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::Graph("loss is not finite".into()));
        }
        (tape.backward(loss)?, tape.activation_pattern())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
    };
    let mut probe = params.clone();
    for id in params.ids().filter(|&id| params.is_trainable(id)) {
        let n = params.get(id).len();
        // Random order over every coordinate; the first accepted ones count.
        let mut r = rng::keyed(&[config.seed, id.0 as u64]);
        let order = index::sample(&mut r, n, n).into_vec();
        let mut accepted = 0;
        for i in order {
            if accepted == config.coords_per_tensor {
                break;
            }
            let (numeric, smooth) = central_difference(&forward, &mut probe, id, i, config.eps, pattern)?;
            if config.skip_kinks && !smooth {
                report.kinks_skipped += 1;
                continue;
            }
            accepted += 1;
            let a = analytic.get(id)[i];
            let err = relative_error(a, numeric, config.floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// The difference quotient, and whether both probes kept `pattern`.
fn central_difference<F>(
    forward: &F,
    probe: &mut ParameterSet<f64>,
    id: ParamId,
    i: usize,
    eps: f64,
    pattern: u64,
) -> Result<(f64, bool)>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let orig = probe.get(id).data()[i];
    probe.get_mut(id).data_mut()[i] = orig + eps;
    let plus = eval_loss(forward, probe);
    probe.get_mut(id).data_mut()[i] = orig - eps;
    let minus = eval_loss(forward, probe);
    probe.get_mut(id).data_mut()[i] = orig;
    let ((plus, pp), (minus, pm)) = (plus?, minus?);
    Ok(((plus - minus) / (2.0 * eps), pp == pattern && pm == pattern))
}
