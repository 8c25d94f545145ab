use std::hash::{Hash, Hasher};

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Gradients, ParamId, ParameterSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<u32> },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Dropout { x: Var, mask: Vec<T> },
    LogSoftmax(Var),
    Nll { x: Var, target: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation for one sample and differentiates it.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParameterSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParameterSet<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a parameter. Repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.require(name)?;
        Ok(self.param(id))
    }

    /// Stride-1 "same" cross-correlation of `C_in x H x W` with
    /// `C_out x C_in x kh x kw` weights.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 || ws[1] != xs[0] || bs[0] != ws[0] || ws[2] == 0 || ws[3] == 0 {
            return Err(Error::shape(
                "conv2d_same",
                format!("input {xs:?}, weights {ws:?}, bias {bs:?}"),
            ));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ws[0],
            h: xs[1],
            w: xs[2],
            kh: ws[2],
            kw: ws[3],
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let t = Tensor::new(vec![geom.c_out, geom.h, geom.w], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }))
    }

    /// `C_in x L` input with `C_out x C_in x k` weights, symmetric padding.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 3 || bs.len() != 1 || ws[1] != xs[0] || bs[0] != ws[0] {
            return Err(Error::shape(
                "conv1d_same",
                format!("input {xs:?}, weights {ws:?}, bias {bs:?}"),
            ));
        }
        let (c, l) = (xs[0], xs[1]);
        let (co, ci, k) = (ws[0], ws[1], ws[2]);
        let x3 = self.reshape(x, vec![c, 1, l])?;
        let w4 = self.reshape(w, vec![co, ci, 1, k])?;
        let y = self.conv2d_same(x3, w4, b)?;
        self.reshape(y, vec![co, l])
    }

    /// 2x2 non-overlapping max pooling over `C x H x W`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::shape("maxpool2", format!("input {s:?} needs H, W >= 2")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), s[0], s[1], s[2], 2, 2);
        let t = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// Pairwise max pooling along the length of a `C x L` input.
    pub fn maxpool1(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::shape("maxpool1", format!("input {s:?} needs L >= 2")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), s[0], 1, s[1], 1, 2);
        let t = Tensor::new(vec![s[0], s[1] / 2], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// `W x + b` for `W: m x n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let n = self.value(x).len();
        if ws.len() != 2 || ws[1] != n || bs != [ws[0]] {
            return Err(Error::shape(
                "dense",
                format!("input {xs:?}, weights {ws:?}, bias {bs:?}"),
            ));
        }
        let m = ws[0];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| bv[i] + wv[i * n..(i + 1) * n].iter().zip(xv).map(|(&a, &c)| a * c).sum::<T>())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::Linear { x, w, b }))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let y = self.linear(x, w, b)?;
        Ok(match act {
            Activation::None => y,
            Activation::Relu => self.relu(y),
        })
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        self.push(t, op)
    }

    /// Hash of which side of zero every ReLU input lies on and which element
    /// won every pooling window. Equal patterns mean two evaluations sit on
    /// the same linear piece of the graph's piecewise-linear operations.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &a in self.value(*x).data() {
                        (a > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |a| T::one() / (T::one() + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |a| a.tanh(), Op::Tanh(x))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Flattens and joins the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<T> = parts.iter().flat_map(|&p| self.value(p).data.iter().copied()).collect();
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    /// Contiguous range of the flattened input, as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.len() {
            return Err(Error::shape("slice", format!("{start}..{} of {}", start + len, v.len())));
        }
        let t = Tensor::vector(v.data[start..start + len].to_vec());
        Ok(self.push(t, Op::Slice { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.reshape(x, vec![n]).expect("flatten preserves length")
    }

    /// Transposes a 2-D `R x C` value.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not 2-D", v.shape)));
        }
        let (r, c) = (v.shape[0], v.shape[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data[i * c + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(x)))
    }

    /// Inverted dropout: identity in eval mode; in train mode each element is
    /// zeroed with probability `p` and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        };
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// `x - logsumexp(x)`, max-shifted.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let max = v.data.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
        // (a - max) - ln(sum) keeps full precision when |max| is large
        let log_sum = v.data.iter().map(|&a| (a - max).exp()).sum::<T>().ln();
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| (a - max) - log_sum).collect(),
        };
        self.push(t, Op::LogSoftmax(x))
    }

    /// `-logprobs[target]`.
    pub fn nll(&mut self, logprobs: Var, target: usize) -> Result<Var> {
        let v = self.value(logprobs);
        if target >= v.len() {
            return Err(Error::arg(format!("target {target} out of range for {} classes", v.len())));
        }
        let t = Tensor::scalar(-v.data[target]);
        Ok(self.push(t, Op::Nll { x: logprobs, target }))
    }

    /// Log-softmax followed by negative log-likelihood.
    pub fn log_softmax_nll(&mut self, logits: Var, target: usize) -> Result<(Var, Var)> {
        if self.value(logits).len() < 2 {
            return Err(Error::arg("log-softmax needs at least two classes"));
        }
        let lp = self.log_softmax(logits);
        let loss = self.nll(lp, target)?;
        Ok((lp, loss))
    }

    /// Standard LSTM cell. `w` is `4m x (n + m)` and `b` is `4m`, gate blocks
    /// ordered (input, forget, cell, output).
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var)> {
        let m = self.value(h).len();
        let n = self.value(x).len();
        let ws = self.shape(w).to_vec();
        if ws != [4 * m, n + m] || self.shape(b) != [4 * m] || self.value(c).len() != m {
            return Err(Error::shape(
                "lstm_step",
                format!("x {n}, h {m}, weights {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let xh = self.concat(&[x, h]);
        let z = self.linear(xh, w, b)?;
        let zi = self.slice(z, 0, m)?;
        let zf = self.slice(z, m, m)?;
        let zg = self.slice(z, 2 * m, m)?;
        let zo = self.slice(z, 3 * m, m)?;
        let i = self.sigmoid(zi);
        let f = self.sigmoid(zf);
        let g = self.tanh(zg);
        let o = self.sigmoid(zo);
        let c_flat = self.flatten(c);
        let fc = self.mul(f, c_flat)?;
        let ig = self.mul(i, g)?;
        let c_next = self.add(fc, ig)?;
        let tc = self.tanh(c_next);
        let h_next = self.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Reverse sweep from a scalar `loss`. Parameters reached through several
    /// paths receive the sum of the path gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Graph("loss variable does not belong to this tape".into()))?;
        if matches!(node.op, Op::Input | Op::Param(_)) {
            return Err(Error::Graph("backward called on a leaf; no computation was recorded".into()));
        }
        if node.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::zeros_like(self.params);

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: impl FnOnce(&mut Vec<T>)) {
            g(grads[v.0].get_or_insert_with(Vec::new));
        }
        fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, src: impl Iterator<Item = (usize, T)>) {
            acc(grads, v, |buf| {
                if buf.is_empty() {
                    buf.resize(len, T::zero());
                }
                for (i, x) in src {
                    buf[i] += x;
                }
            });
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (o, &x) in out.get_mut(*id).iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), &g);
                    add_into(&mut grads, *x, gx.len(), gx.into_iter().enumerate());
                    add_into(&mut grads, *w, gw.len(), gw.into_iter().enumerate());
                    add_into(&mut grads, *b, gb.len(), gb.into_iter().enumerate());
                }
                Op::MaxPool { x, argmax } => {
                    let gx = kernels::maxpool_backward(val(*x).len(), argmax, &g);
                    add_into(&mut grads, *x, gx.len(), gx.into_iter().enumerate());
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x).data(), val(*w).data());
                    let (m, n) = (g.len(), xv.len());
                    let mut gx = vec![T::zero(); n];
                    let mut gw = vec![T::zero(); m * n];
                    for i in 0..m {
                        let gi = g[i];
                        let row = &wv[i * n..(i + 1) * n];
                        for j in 0..n {
                            gx[j] += row[j] * gi;
                        }
                        for (d, &xj) in gw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                            *d = gi * xj;
                        }
                    }
                    add_into(&mut grads, *x, n, gx.into_iter().enumerate());
                    add_into(&mut grads, *w, m * n, gw.into_iter().enumerate());
                    add_into(&mut grads, *b, m, g.iter().copied().enumerate());
                }
                Op::Relu(x) => {
                    let xv = val(*x).data();
                    let it = g.iter().zip(xv).map(|(&gv, &a)| if a > T::zero() { gv } else { T::zero() });
                    add_into(&mut grads, *x, xv.len(), it.enumerate());
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let it = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s));
                    add_into(&mut grads, *x, y.len(), it.enumerate());
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let it = g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t));
                    add_into(&mut grads, *x, y.len(), it.enumerate());
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, g.len(), g.iter().copied().enumerate());
                    add_into(&mut grads, *b, g.len(), g.iter().copied().enumerate());
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, *a, g.len(), g.iter().copied().enumerate());
                    add_into(&mut grads, *b, g.len(), g.iter().map(|&x| -x).enumerate());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    add_into(&mut grads, *a, g.len(), g.iter().zip(bv).map(|(&x, &y)| x * y).enumerate());
                    add_into(&mut grads, *b, g.len(), g.iter().zip(av).map(|(&x, &y)| x * y).enumerate());
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        add_into(&mut grads, p, n, g[off..off + n].iter().copied().enumerate());
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = val(*x).len();
                    add_into(&mut grads, *x, n, g.iter().copied().enumerate().map(|(i, v)| (i + start, v)));
                }
                Op::Reshape(x) => {
                    add_into(&mut grads, *x, g.len(), g.iter().copied().enumerate());
                }
                Op::Transpose(x) => {
                    let s = val(*x).shape();
                    let (r, c) = (s[0], s[1]);
                    // g is c x r; input element (i, j) maps to output (j, i)
                    let it = (0..r * c).map(|k| (k, g[(k % c) * r + k / c]));
                    add_into(&mut grads, *x, r * c, it);
                }
                Op::Dropout { x, mask } => {
                    add_into(&mut grads, *x, g.len(), g.iter().zip(mask).map(|(&a, &m)| a * m).enumerate());
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let total: T = g.iter().copied().sum();
                    let it = g.iter().zip(y).map(|(&gv, &lp)| gv - lp.exp() * total);
                    add_into(&mut grads, *x, y.len(), it.enumerate());
                }
                Op::Nll { x, target } => {
                    let n = val(*x).len();
                    add_into(&mut grads, *x, n, std::iter::once((*target, -g[0])));
                }
            }
        }
        Ok(out)
    }
}
