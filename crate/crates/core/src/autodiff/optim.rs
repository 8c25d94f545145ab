use super::{Gradients, ParameterSet, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParameterSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| vec![T::zero(); params.get(id).len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step<T: Scalar>(params: &mut ParameterSet<T>, grads: &Gradients<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state tracks {} tensors, parameter set has {}", state.m.len(), params.len()),
        ));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    let (lr, eps) = (T::of(lr), T::of(eps));

    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.is_trainable(id) {
            continue;
        }
        let g = grads.get(id);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = params.get_mut(id).data_mut();
        if g.len() != p.len() || m.len() != p.len() {
            return Err(Error::shape("adam_step", format!("gradient length {} vs {}", g.len(), p.len())));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::arg(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Adam or plain gradient descent behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Adam(AdamState<T>),
    Sgd { lr: f64 },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ParameterSet<T>, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params, AdamConfig { lr, ..Default::default() })),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &Gradients<T>) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(params, grads, state),
            Optimizer::Sgd { lr } => {
                let lr = T::of(*lr);
                let ids: Vec<_> = params.ids().collect();
                for id in ids {
                    if params.is_trainable(id) {
                        for (p, &g) in params.get_mut(id).data_mut().iter_mut().zip(grads.get(id)) {
                            *p -= lr * g;
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamId, Tensor};

    fn one_param(x: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.add("w", Tensor::vector(vec![x, -x, 2.0 * x])).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut p = one_param(1.0);
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(ParamId(0)).copy_from_slice(&[3.0, -0.5, 1e3]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s).unwrap();
        let got = p.get(ParamId(0)).data();
        let expected = [1.0 - 1e-3, -1.0 + 1e-3, 2.0 - 1e-3];
        for (a, b) in got.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_param(0.3);
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn scalar_sequence_matches_hand_roll() {
        let mut p = ParameterSet::<f64>::new();
        p.add("w", Tensor::scalar(0.0)).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(ParamId(0))[0] = 1.0;
        let mut s = AdamState::new(&p, AdamConfig::default());

        // independent hand roll of the textbook recurrences
        let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            adam_step(&mut p, &g, &mut s).unwrap();
            assert!((p.get(ParamId(0)).data()[0] - w).abs() < 1e-9);
        }
        assert_eq!(s.step, 5);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut p = ParameterSet::<f32>::new();
        p.add_with("stat", Tensor::vector(vec![1.0]), false).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(ParamId(0))[0] = 5.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &p, 0.1);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get(ParamId(0)).data(), &[1.0]);
    }
}
