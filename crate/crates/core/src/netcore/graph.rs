//! Tape-based reverse-mode automatic differentiation.
//!
//! Every backward rule is written in terms of graph operations, so the
//! gradients produced with `create_graph = true` are themselves
//! differentiable. The gradient penalty depends on this: it differentiates the
//! norm of an input gradient with respect to the critic parameters.
//!
//! The fused batch-norm rule is the one exception; it only supports
//! first-order gradients.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::scalar::Scalar;
use super::tensor::{self, ConvGeom, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone)]
enum Op<T: Scalar> {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Rc<Tensor<T>>),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddBias { x: Var, b: Var },
    ChannelSum(Var),
    ChannelBroadcast(Var),
    Im2Col(Var, ConvGeom),
    Col2Im(Var, ConvGeom),
    Permute(Var, [usize; 4]),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Pad { x: Var, start: usize },
    Sum(Var),
    Expand(Var),
    SumLast(Var),
    ExpandLast(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    AvgPool(Var, usize),
    AvgUnpool(Var, usize),
    GlobalAvgPool(Var),
    GapExpand(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm(Box<BnSaved<T>>),
    BceWithLogits { z: Var, targets: Rc<Tensor<T>> },
}

#[derive(Clone)]
struct BnSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    invstd: Vec<T>,
    training: bool,
}

struct Node<T: Scalar> {
    value: Option<Rc<Tensor<T>>>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm call.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var: Vec<T>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A graph that records no operations; for inference.
    pub fn no_grad() -> Self {
        let g = Self::new();
        g.recording.set(false);
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Some(Rc::new(t)),
            op: None,
            requires_grad: self.recording.get(),
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.constant_rc(Rc::new(t))
    }

    fn constant_rc(&self, t: Rc<Tensor<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Some(t),
            op: None,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0]
            .value
            .clone()
            .expect("node value was released by a consuming backward pass")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.recording.get() && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Some(Rc::new(value)),
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn release(&self, v: Var) {
        self.nodes.borrow_mut()[v.0].value = None;
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(&self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(&self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(&self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Multiply by a tensor that is treated as a constant (masks, dropout).
    pub fn mul_const(&self, a: Var, c: Rc<Tensor<T>>) -> Var {
        let v = self.value(a).zip(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        let mask = self
            .value(a)
            .map(|x| if x > T::zero() { T::one() } else { slope });
        self.mul_const(a, Rc::new(mask))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn recip(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.recip());
        self.push(v, Op::Recip(a), &[a])
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = (*self.value(a)).clone().reshaped(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn permute(&self, a: Var, perm: [usize; 4]) -> Var {
        let v = tensor::permute4(&self.value(a), perm);
        self.push(v, Op::Permute(a, perm), &[a])
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let v = tensor::concat_channels(&refs);
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_channels(&self, a: Var, start: usize, len: usize) -> Var {
        let v = tensor::slice_channels(&self.value(a), start, len);
        self.push(v, Op::Slice { x: a, start }, &[a])
    }

    fn pad_channels(&self, a: Var, start: usize, total: usize) -> Var {
        let v = tensor::pad_channels(&self.value(a), start, total);
        self.push(v, Op::Pad { x: a, start }, &[a])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&self, a: Var, shape: &[usize]) -> Var {
        let v = Tensor::full(shape, self.value(a).item());
        self.push(v, Op::Expand(a), &[a])
    }

    /// Row sums of a 2-D tensor.
    pub fn sum_last(&self, a: Var) -> Var {
        let v = tensor::sum_last(&self.value(a));
        self.push(v, Op::SumLast(a), &[a])
    }

    fn expand_last(&self, a: Var, c: usize) -> Var {
        let v = tensor::expand_last(&self.value(a), c);
        self.push(v, Op::ExpandLast(a), &[a])
    }

    fn channel_sum(&self, a: Var) -> Var {
        let v = tensor::channel_sum(&self.value(a));
        self.push(v, Op::ChannelSum(a), &[a])
    }

    fn channel_broadcast(&self, a: Var, shape: &[usize]) -> Var {
        let v = tensor::channel_broadcast(&self.value(a), shape);
        self.push(v, Op::ChannelBroadcast(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = tensor::matmul(&self.value(a), &self.value(b), ta, tb);
        self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Add a per-channel bias along axis 1.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = tensor::channel_broadcast(&self.value(b), xv.shape());
        let v = xv.zip(&bv, |p, q| p + q);
        self.push(v, Op::AddBias { x, b }, &[x, b])
    }

    pub fn im2col(&self, x: Var, geom: ConvGeom) -> Var {
        let v = tensor::im2col(&self.value(x), &geom);
        self.push(v, Op::Im2Col(x, geom), &[x])
    }

    pub fn col2im(&self, cols: Var, geom: ConvGeom) -> Var {
        let v = tensor::col2im(&self.value(cols), &geom);
        self.push(v, Op::Col2Im(cols, geom), &[cols])
    }

    /// Convolution without bias. `x: [N,C,H,W]`, `w: [O,C,k,k]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let s = xv.shape();
        let (o, k) = (wv.shape()[0], wv.shape()[2]);
        let geom = ConvGeom {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            k,
            stride,
            pad,
        };
        let cols = tensor::im2col(&xv, &geom);
        let w2 = (*wv).clone().reshaped(&[o, geom.cols()]);
        let y = tensor::matmul(&cols, &w2, false, true);
        drop(cols);
        let y = tensor::permute4(&y.reshaped(&[s[0], geom.out_h(), geom.out_w(), o]), [0, 3, 1, 2]);
        self.push(y, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Transposed convolution without bias. `x: [N,C,H,W]`, `w: [C,O,k,k]`.
    /// Output spatial size is the `out_hw` whose forward convolution with the
    /// same kernel/stride/pad yields `H×W`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let s = xv.shape().to_vec();
        let (o, k) = (wv.shape()[1], wv.shape()[2]);
        let geom = ConvGeom {
            n: s[0],
            c: o,
            h: out_hw.0,
            w: out_hw.1,
            k,
            stride,
            pad,
        };
        assert_eq!(
            (geom.out_h(), geom.out_w()),
            (s[2], s[3]),
            "transposed conv geometry does not invert to the input size"
        );
        let xt = tensor::permute4(&xv, [0, 2, 3, 1]).reshaped(&[s[0] * s[2] * s[3], s[1]]);
        let w2 = (*wv).clone().reshaped(&[s[1], o * k * k]);
        let cols = tensor::matmul(&xt, &w2, false, false);
        let y = tensor::col2im(&cols, &geom);
        self.push(y, Op::ConvTranspose2d { x, w, geom }, &[x, w])
    }

    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        let v = tensor::avg_pool(&self.value(x), k);
        self.push(v, Op::AvgPool(x, k), &[x])
    }

    fn avg_unpool(&self, g: Var, k: usize, h: usize, w: usize) -> Var {
        let v = tensor::avg_unpool(&self.value(g), k, h, w);
        self.push(v, Op::AvgUnpool(g, k), &[g])
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let hw = s[2] * s[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let data = xv
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::from_vec(&[s[0], s[1]], data);
        self.push(v, Op::GlobalAvgPool(x), &[x])
    }

    fn gap_expand(&self, g: Var, h: usize, w: usize) -> Var {
        let gv = self.value(g);
        let s = gv.shape();
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut data = Vec::with_capacity(gv.len() * h * w);
        for &val in gv.data() {
            data.extend(std::iter::repeat_n(val * inv, h * w));
        }
        let v = Tensor::from_vec(&[s[0], s[1], h, w], data);
        self.push(v, Op::GapExpand(g), &[g])
    }

    // ---- fused -------------------------------------------------------------

    /// Batch normalization over every axis except 1.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can update its running averages; otherwise `running` is used.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> (Var, Option<BatchStats<T>>) {
        let xv = self.value(x);
        let (n, c, inner) = xv.channel_layout();
        let m = n * inner;
        let eps = T::from_f64(eps);
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..n {
                    for (ch, acc) in mean.iter_mut().enumerate() {
                        let s: T = xv.data()[(b * c + ch) * inner..][..inner].iter().copied().sum();
                        *acc += s;
                    }
                }
                let mf = T::from_f64(m as f64);
                for v in mean.iter_mut() {
                    *v = *v / mf;
                }
                for b in 0..n {
                    for ch in 0..c {
                        let mu = mean[ch];
                        let s: T = xv.data()[(b * c + ch) * inner..][..inner]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum();
                        var[ch] += s;
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / mf;
                }
                let unbiased = if m > 1 {
                    let f = T::from_f64(m as f64 / (m - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let invstd: Vec<T> = var_biased.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..n {
            for ch in 0..c {
                let (mu, is, ga, be) = (mean[ch], invstd[ch], gv.data()[ch], bv.data()[ch]);
                out.extend(
                    xv.data()[(b * c + ch) * inner..][..inner]
                        .iter()
                        .map(|&v| (v - mu) * is * ga + be),
                );
            }
        }
        let y = Tensor::from_vec(xv.shape(), out);
        let training = stats.is_some();
        let var = self.push(
            y,
            Op::BatchNorm(Box::new(BnSaved {
                x,
                gamma,
                beta,
                mean,
                invstd,
                training,
            })),
            &[x, gamma, beta],
        );
        (var, stats)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against constant targets,
    /// computed from logits for numerical stability.
    pub fn bce_with_logits(&self, z: Var, targets: Rc<Tensor<T>>) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.shape(), targets.shape(), "bce target shape");
        let n = zv.len();
        let total: T = zv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let v = Tensor::scalar(total / T::from_f64(n as f64));
        self.push(v, Op::BceWithLogits { z, targets }, &[z])
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `output` with respect to `inputs`.
    ///
    /// With `create_graph` the returned gradients are recorded and can be
    /// differentiated again. Inputs that `output` does not depend on get a
    /// zero gradient.
    pub fn grad(&self, output: Var, inputs: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        self.backward_impl(output, inputs, create_graph, false)
    }

    /// First-order gradients as plain tensors. Intermediate values are
    /// released while walking the tape, so the graph cannot be used for
    /// further differentiation afterwards.
    pub fn backward(&self, output: Var, inputs: &[Var]) -> Result<Vec<Tensor<T>>> {
        let grads = self.backward_impl(output, inputs, false, true)?;
        Ok(grads.iter().map(|&g| (*self.value(g)).clone()).collect())
    }

    fn backward_impl(
        &self,
        output: Var,
        inputs: &[Var],
        create_graph: bool,
        consume: bool,
    ) -> Result<Vec<Var>> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::Unsupported(format!(
                "gradient of non-scalar output with shape {:?}",
                out_val.shape()
            )));
        }
        let was_recording = self.recording.get();
        self.recording.set(create_graph);
        let result = self.walk(output, inputs, consume);
        self.recording.set(was_recording);
        result
    }

    fn walk(&self, output: Var, inputs: &[Var], consume: bool) -> Result<Vec<Var>> {
        let n = output.0 + 1;
        let mut slots = GradSlots::new(n, consume);
        let mut keep = vec![false; n];
        for v in inputs {
            if v.0 < n {
                keep[v.0] = true;
            }
        }
        let seed = self.constant(Tensor::full(&self.shape(output), T::one()));
        slots.set(output.0, seed);

        for i in (0..n).rev() {
            let Some(g) = slots.get(i) else { continue };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[i].requires_grad {
                    continue;
                }
                nodes[i].op.clone()
            };
            let Some(op) = op else { continue };
            let mark = self.len();
            for (parent, pg) in self.rule(Var(i), &op, g)? {
                if !self.requires_grad(parent) {
                    continue;
                }
                match slots.get(parent.0) {
                    None => slots.set(parent.0, pg),
                    Some(prev) => {
                        let sum = self.add(prev, pg);
                        slots.clear(parent.0, self);
                        slots.set(parent.0, sum);
                    }
                }
            }
            if consume {
                for j in mark..self.len() {
                    if !slots.is_held(Var(j)) {
                        self.release(Var(j));
                    }
                }
                if !keep[i] {
                    slots.clear(i, self);
                    self.release(Var(i));
                }
            }
        }

        Ok(inputs
            .iter()
            .map(|v| match slots.get(v.0) {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&self.shape(*v))),
            })
            .collect())
    }

    /// Parent gradient contributions of node `y` given its output gradient.
    fn rule(&self, y: Var, op: &Op<T>, g: Var) -> Result<Vec<(Var, Var)>> {
        let neg = T::from_f64(-1.0);
        Ok(match op {
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g), (*b, self.scale(g, neg))],
            Op::Mul(a, b) => vec![(*a, self.mul(g, *b)), (*b, self.mul(g, *a))],
            Op::Scale(a, s) => vec![(*a, self.scale(g, *s))],
            Op::AddScalar(a) => vec![(*a, g)],
            Op::MulConst(a, c) => vec![(*a, self.mul_const(g, c.clone()))],
            Op::MatMul { a, b, ta, tb } => {
                let (a, b) = (*a, *b);
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (self.matmul(g, b, false, true), self.matmul(a, g, true, false)),
                    (false, true) => (self.matmul(g, b, false, false), self.matmul(g, a, true, false)),
                    (true, false) => (self.matmul(b, g, false, true), self.matmul(a, g, false, false)),
                    (true, true) => (self.matmul(b, g, true, true), self.matmul(g, a, true, true)),
                };
                vec![(a, ga), (b, gb)]
            }
            Op::AddBias { x, b } => vec![(*x, g), (*b, self.channel_sum(g))],
            Op::ChannelSum(x) => vec![(*x, self.channel_broadcast(g, &self.shape(*x)))],
            Op::ChannelBroadcast(v) => vec![(*v, self.channel_sum(g))],
            Op::Im2Col(x, geom) => vec![(*x, self.col2im(g, *geom))],
            Op::Col2Im(c, geom) => vec![(*c, self.im2col(g, *geom))],
            Op::Permute(x, perm) => vec![(*x, self.permute(g, tensor::inverse_perm(*perm)))],
            Op::Reshape(x) => vec![(*x, self.reshape(g, &self.shape(*x)))],
            Op::Concat(parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.push((p, self.slice_channels(g, off, c)));
                    off += c;
                }
                out
            }
            Op::Slice { x, start } => {
                let total = self.shape(*x)[1];
                vec![(*x, self.pad_channels(g, *start, total))]
            }
            Op::Pad { x, start } => {
                let len = self.shape(*x)[1];
                vec![(*x, self.slice_channels(g, *start, len))]
            }
            Op::Sum(x) => vec![(*x, self.expand(g, &self.shape(*x)))],
            Op::Expand(x) => vec![(*x, self.sum(g))],
            Op::SumLast(x) => {
                let c = self.shape(*x)[1];
                vec![(*x, self.expand_last(g, c))]
            }
            Op::ExpandLast(x) => vec![(*x, self.sum_last(g))],
            Op::Tanh(x) => {
                let y2 = self.mul(y, y);
                let d = self.add_scalar(self.scale(y2, neg), T::one());
                vec![(*x, self.mul(g, d))]
            }
            Op::Sigmoid(x) => {
                let one_minus = self.add_scalar(self.scale(y, neg), T::one());
                let d = self.mul(y, one_minus);
                vec![(*x, self.mul(g, d))]
            }
            Op::Sqrt(x) => {
                let d = self.scale(self.recip(y), T::from_f64(0.5));
                vec![(*x, self.mul(g, d))]
            }
            Op::Recip(x) => {
                let d = self.scale(self.mul(y, y), neg);
                vec![(*x, self.mul(g, d))]
            }
            Op::AvgPool(x, k) => {
                let s = self.shape(*x);
                vec![(*x, self.avg_unpool(g, *k, s[2], s[3]))]
            }
            Op::AvgUnpool(x, k) => vec![(*x, self.avg_pool(g, *k))],
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                vec![(*x, self.gap_expand(g, s[2], s[3]))]
            }
            Op::GapExpand(x) => vec![(*x, self.global_avg_pool(g))],
            Op::Conv2d { x, w, geom } => {
                let (x, w) = (*x, *w);
                let ws = self.shape(w);
                let o = ws[0];
                let gy = self.reshape(self.permute(g, [0, 2, 3, 1]), &[geom.rows(), o]);
                let w2 = self.reshape(w, &[o, geom.cols()]);
                let gx = self.col2im(self.matmul(gy, w2, false, false), *geom);
                let cols = self.im2col(x, *geom);
                let gw = self.reshape(self.matmul(gy, cols, true, false), &ws);
                vec![(x, gx), (w, gw)]
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (x, w) = (*x, *w);
                let xs = self.shape(x);
                let ws = self.shape(w);
                let rows = xs[0] * xs[2] * xs[3];
                let gcols = self.im2col(g, *geom);
                let w2 = self.reshape(w, &[xs[1], geom.cols()]);
                let gxt = self.matmul(gcols, w2, false, true);
                let gx = self.permute(self.reshape(gxt, &[xs[0], xs[2], xs[3], xs[1]]), [0, 3, 1, 2]);
                let xt = self.reshape(self.permute(x, [0, 2, 3, 1]), &[rows, xs[1]]);
                let gw = self.reshape(self.matmul(xt, gcols, true, false), &ws);
                vec![(x, gx), (w, gw)]
            }
            Op::BatchNorm(saved) => {
                if self.recording.get() {
                    return Err(Error::Unsupported(
                        "second-order gradients through batch_norm".into(),
                    ));
                }
                let (dx, dgamma, dbeta) = self.bn_backward(saved, g);
                vec![
                    (saved.x, self.constant(dx)),
                    (saved.gamma, self.constant(dgamma)),
                    (saved.beta, self.constant(dbeta)),
                ]
            }
            Op::BceWithLogits { z, targets } => {
                let n = self.value(*z).len();
                let s = self.sigmoid(*z);
                let t = self.constant_rc(targets.clone());
                let d = self.scale(self.sub(s, t), T::from_f64(1.0 / n as f64));
                let gz = self.mul(d, self.expand(g, &self.shape(*z)));
                vec![(*z, gz)]
            }
        })
    }

    fn bn_backward(&self, s: &BnSaved<T>, g: Var) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let xv = self.value(s.x);
        let gv = self.value(g);
        let gamma = self.value(s.gamma);
        let (n, c, inner) = xv.channel_layout();
        let m = T::from_f64((n * inner) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                let (mu, is) = (s.mean[ch], s.invstd[ch]);
                for i in 0..inner {
                    let gg = gv.data()[off + i];
                    dbeta[ch] += gg;
                    dgamma[ch] += gg * (xv.data()[off + i] - mu) * is;
                }
            }
        }
        let mut dx = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                let (mu, is, ga) = (s.mean[ch], s.invstd[ch], gamma.data()[ch]);
                for i in 0..inner {
                    let gg = gv.data()[off + i];
                    dx[off + i] = if s.training {
                        let xhat = (xv.data()[off + i] - mu) * is;
                        ga * is / m * (m * gg - dbeta[ch] - xhat * dgamma[ch])
                    } else {
                        gg * ga * is
                    };
                }
            }
        }
        (
            Tensor::from_vec(xv.shape(), dx),
            Tensor::from_vec(&[c], dgamma),
            Tensor::from_vec(&[c], dbeta),
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradient accumulators indexed by node, with reference counts so that a
/// consuming backward pass can release gradient values as soon as no slot
/// holds them.
struct GradSlots {
    slots: Vec<Option<Var>>,
    refs: std::collections::HashMap<Var, usize>,
    consume: bool,
}

impl GradSlots {
    fn new(n: usize, consume: bool) -> Self {
        GradSlots {
            slots: vec![None; n],
            refs: Default::default(),
            consume,
        }
    }

    fn get(&self, i: usize) -> Option<Var> {
        self.slots.get(i).copied().flatten()
    }

    fn set(&mut self, i: usize, v: Var) {
        self.slots[i] = Some(v);
        *self.refs.entry(v).or_insert(0) += 1;
    }

    fn is_held(&self, v: Var) -> bool {
        self.refs.get(&v).is_some_and(|&c| c > 0)
    }

    fn clear<T: Scalar>(&mut self, i: usize, graph: &Graph<T>) {
        if let Some(v) = self.slots[i].take() {
            let c = self.refs.get_mut(&v).expect("slot without refcount");
            *c -= 1;
            if *c == 0 {
                self.refs.remove(&v);
                if self.consume {
                    graph.release(v);
                }
            }
        }
    }
}
