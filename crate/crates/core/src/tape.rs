//! Reverse-mode automatic differentiation over dense vectors.
//!
//! A [`Tape`] records every operation of one forward pass. Values are flat
//! `f64` vectors; matrices are row-major and their shape is implied by the
//! operand they are multiplied with. [`Tape::backward`] walks the record in
//! reverse and returns gradients for every node.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::flow::{householder_backward, HOUSEHOLDER_EPS};
use crate::numerics::dot;
use crate::params::{ParamId, ParamStore};
#[allow(unused_imports)] // float math for no_std; inherent methods need std
use num_traits::Float;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Geometry of a 3x3, stride-2, padding-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvShape {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;

    pub fn out_height(&self) -> usize {
        (self.height - 1) / Self::STRIDE + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / Self::STRIDE + 1
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * Self::KERNEL * Self::KERNEL
    }

    fn input_index(&self, ci: usize, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<usize> {
        let h = (oh * Self::STRIDE + kh).checked_sub(1)?;
        let w = (ow * Self::STRIDE + kw).checked_sub(1)?;
        if h >= self.height || w >= self.width {
            return None;
        }
        Some((ci * self.height + h) * self.width + w)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    MatTVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Softmax(Var),
    MeanSquaredError(Var, Var),
    Reflect(Var, Var),
    Conv(Var, Var, Var, ConvShape),
    AdditiveScores(Var, Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Record of one forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Leaf node holding a constant or an input that gradients are wanted for.
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a parameter tensor; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() < store.len() {
            self.params.resize(store.len(), None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.input(store.get(id).to_vec());
        self.params[id.0] = Some(v);
        v
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let cols = self.dim(x);
        let (mv, xv) = (self.value(m), self.value(x));
        debug_assert_eq!(mv.len() % cols.max(1), 0);
        let out = mv.chunks(cols).map(|row| dot(row, xv)).collect();
        self.push(out, Op::MatVec(m, x))
    }

    /// `m^T x` where `m` has `dim(x)` rows.
    pub fn matvec_t(&mut self, m: Var, x: Var) -> Var {
        let rows = self.dim(x);
        let cols = self.dim(m) / rows;
        let mut out = vec![0.0; cols];
        for (row, &w) in self.value(m).chunks(cols).zip(self.value(x)) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += w * r;
            }
        }
        self.push(out, Op::MatTVec(m, x))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        debug_assert_eq!(self.dim(a), self.dim(b));
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, libm::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, libm::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::with_capacity(parts.iter().map(|&p| self.dim(p)).sum());
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a)[start..start + len].to_vec();
        self.push(out, Op::Slice(a, start))
    }

    /// Picks entries of `a` by index; indices may repeat.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let src = self.value(a);
        let out = indices.iter().map(|&i| src[i]).collect();
        self.push(out, Op::Gather(a, indices))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.dim(a) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        self.push(vec![s], Op::Mean(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s = dot(self.value(a), self.value(b));
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| libm::exp(x - m)).collect();
        let z: f64 = e.iter().sum();
        let out = e.into_iter().map(|x| x / z).collect();
        self.push(out, Op::Softmax(a))
    }

    /// Mean over entries of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        check_len(self.dim(a), self.dim(b)).expect("mse operands have equal length");
        let n = self.dim(a) as f64;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(vec![s], Op::MeanSquaredError(a, b))
    }

    /// Householder reflection of `z` across the hyperplane orthogonal to `v`.
    pub fn reflect(&mut self, v: Var, z: Var) -> Result<Var> {
        check_len(self.dim(v), self.dim(z))?;
        let (vv, zv) = (self.value(v), self.value(z));
        let nn = dot(vv, vv);
        if !(nn.sqrt() >= HOUSEHOLDER_EPS) {
            return Err(Error::DegenerateReflector { norm: nn.sqrt() });
        }
        let c = 2.0 * dot(vv, zv) / nn;
        let out = zv.iter().zip(vv).map(|(z, v)| z - c * v).collect();
        Ok(self.push(out, Op::Reflect(v, z)))
    }

    /// 3x3 stride-2 convolution with zero padding 1; input is channel-major
    /// `in_channels x height x width`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, shape: ConvShape) -> Result<Var> {
        check_len(shape.in_channels * shape.height * shape.width, self.dim(input))?;
        check_len(shape.kernel_len(), self.dim(kernel))?;
        check_len(shape.out_channels, self.dim(bias))?;
        let (oh, ow) = (shape.out_height(), shape.out_width());
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let mut out = vec![0.0; shape.out_channels * oh * ow];
        for co in 0..shape.out_channels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..shape.in_channels {
                        let kbase = (co * shape.in_channels + ci) * 9;
                        for kh in 0..3 {
                            for kw in 0..3 {
                                if let Some(idx) = shape.input_index(ci, i, j, kh, kw) {
                                    acc += k[kbase + kh * 3 + kw] * x[idx];
                                }
                            }
                        }
                    }
                    out[(co * oh + i) * ow + j] = acc;
                }
            }
        }
        Ok(self.push(out, Op::Conv(input, kernel, bias, shape)))
    }

    /// Additive attention energies `s_i = w . tanh(q + k_i)` where `keys` holds
    /// the already projected key rows, each of length `dim(q)`.
    pub fn additive_scores(&mut self, q: Var, keys: Var, w: Var) -> Var {
        let a = self.dim(q);
        let (qv, kv, wv) = (self.value(q), self.value(keys), self.value(w));
        let out = kv
            .chunks(a)
            .map(|k| k.iter().zip(qv).zip(wv).map(|((k, q), w)| w * libm::tanh(k + q)).sum())
            .collect();
        self.push(out, Op::AdditiveScores(q, keys, w))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0; self.dim(loss)]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(m, x) => {
                let cols = val(*x).len();
                let mv = val(*m);
                acc(*m, &mut |gm| {
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            for (gmv, xv) in gm[r * cols..(r + 1) * cols].iter_mut().zip(val(*x)) {
                                *gmv += gr * xv;
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (row, &gr) in mv.chunks(cols).zip(g) {
                        for (gxv, mrv) in gx.iter_mut().zip(row) {
                            *gxv += gr * mrv;
                        }
                    }
                });
            }
            Op::MatTVec(m, x) => {
                let cols = g.len();
                let mv = val(*m);
                acc(*m, &mut |gm| {
                    for (r, &xr) in val(*x).iter().enumerate() {
                        for (gmv, gc) in gm[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                            *gmv += xr * gc;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (gxv, row) in gx.iter_mut().zip(mv.chunks(cols)) {
                        *gxv += dot(row, g);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Affine(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Relu(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    if out[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |gp| {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y)
                    });
                    off += n;
                }
            }
            Op::Slice(a, start) => acc(*a, &mut |ga| {
                ga[*start..*start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y)
            }),
            Op::Gather(a, indices) => acc(*a, &mut |ga| {
                for (&i, gv) in indices.iter().zip(g) {
                    ga[i] += gv;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(bv).for_each(|(x, y)| *x += g[0] * y));
                acc(*b, &mut |gb| gb.iter_mut().zip(av).for_each(|(x, y)| *x += g[0] * y));
            }
            Op::Softmax(a) => {
                let s = dot(g, out);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += out[i] * (g[i] - s);
                    }
                })
            }
            Op::MeanSquaredError(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += c * (av[i] - bv[i]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= c * (av[i] - bv[i]);
                    }
                });
            }
            Op::Reflect(v, z) => {
                let (gv, gz) = householder_backward(val(*v), val(*z), g);
                acc(*v, &mut |x| x.iter_mut().zip(&gv).for_each(|(a, b)| *a += b));
                acc(*z, &mut |x| x.iter_mut().zip(&gz).for_each(|(a, b)| *a += b));
            }
            Op::Conv(input, kernel, bias, shape) => {
                let (x, k) = (val(*input), val(*kernel));
                let (oh, ow) = (shape.out_height(), shape.out_width());
                let mut gx = vec![0.0; x.len()];
                let mut gk = vec![0.0; k.len()];
                let mut gb = vec![0.0; shape.out_channels];
                for co in 0..shape.out_channels {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = g[(co * oh + i) * ow + j];
                            if go == 0.0 {
                                continue;
                            }
                            gb[co] += go;
                            for ci in 0..shape.in_channels {
                                let kbase = (co * shape.in_channels + ci) * 9;
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        if let Some(idx) = shape.input_index(ci, i, j, kh, kw) {
                                            gk[kbase + kh * 3 + kw] += go * x[idx];
                                            gx[idx] += go * k[kbase + kh * 3 + kw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*input, &mut |t| t.iter_mut().zip(&gx).for_each(|(a, b)| *a += b));
                acc(*kernel, &mut |t| t.iter_mut().zip(&gk).for_each(|(a, b)| *a += b));
                acc(*bias, &mut |t| t.iter_mut().zip(&gb).for_each(|(a, b)| *a += b));
            }
            Op::AdditiveScores(q, keys, w) => {
                let (qv, kv, wv) = (val(*q), val(*keys), val(*w));
                let a = qv.len();
                let mut gq = vec![0.0; a];
                let mut gk = vec![0.0; kv.len()];
                let mut gw = vec![0.0; a];
                for (i, k) in kv.chunks(a).enumerate() {
                    for d in 0..a {
                        let t = libm::tanh(k[d] + qv[d]);
                        gw[d] += g[i] * t;
                        let gp = g[i] * wv[d] * (1.0 - t * t);
                        gq[d] += gp;
                        gk[i * a + d] += gp;
                    }
                }
                acc(*q, &mut |t| t.iter_mut().zip(&gq).for_each(|(a, b)| *a += b));
                acc(*keys, &mut |t| t.iter_mut().zip(&gk).for_each(|(a, b)| *a += b));
                acc(*w, &mut |t| t.iter_mut().zip(&gw).for_each(|(a, b)| *a += b));
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient for a node; zeros when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.grads
            .get(v.0)
            .and_then(Clone::clone)
            .unwrap_or_else(|| vec![0.0; tape.dim(v)])
    }

    /// Gradients aligned with the tensors of `store`.
    pub fn params(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(id.0)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect()
    }
}
