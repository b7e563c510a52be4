//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation is a method on [`Tape`] that evaluates eagerly, appends a
//! node and returns a [`Var`] handle. Nodes only ever reference earlier
//! nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Neg,
    Relu,
    Clamp { lo: f64, hi: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    BiasAdd { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    ConcatChannels(Var, Var),
    Sum(Var),
    L2Norm(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

/// True when `b` can be broadcast onto `a` by repetition along leading axes.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input value. Gradients are only tracked through leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::invalid(format!("{kind:?} needs two operands")));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Neg => self.neg(a),
            Elementwise::Relu => self.relu(a),
            Elementwise::Clamp { lo, hi } => self.clamp(a, lo, hi),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcastable(av.shape(), bv.shape()) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let bd = bv.data();
        let data = av
            .data()
            .chunks(bd.len().max(1))
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Neg(a), rg, "neg")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, factor), rg, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg, "relu")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp { x: a, lo, hi }, rg, "clamp")
    }

    /// Adds a per-channel bias `[C]` to an `[N, C, H, W]` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.ndim() != 4 || bv.shape() != [xv.shape()[1]] {
            return Err(Error::shape("bias_add", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let plane = xv.shape()[2] * xv.shape()[3];
        let c = xv.shape()[1];
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = bv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::BiasAdd { x, bias }, rg, "bias_add")
    }

    /// 2-D cross-correlation of `[N, C, H, W]` with a `[F, C, kH, kW]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 4 || wv.ndim() != 4 {
            return Err(Error::shape("conv2d", "expected 4-D input and kernel"));
        }
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (f, kc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if kc != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels, kernel expects {kc}")));
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("{h}x{wd} input, {kh}x{kw} kernel, stride {stride}, padding {padding}"),
            )
        })?;
        let y = kernels::conv_forward(xv.data(), n, wv.data(), f, &geom);
        let y = Tensor::new(vec![n, f, geom.out_h, geom.out_w], y)?;
        let rg = self.rg(&[x, w]);
        self.push(y, Op::Conv2d { x, w, geom }, rg, "conv2d")
    }

    /// Adjoint of [`Tape::conv2d`] for a shared kernel of shape `[C_in, C_out, kH, kW]`.
    /// Output spatial size is `(H - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 4 || wv.ndim() != 4 {
            return Err(Error::shape("conv_transpose2d", "expected 4-D input and kernel"));
        }
        let (n, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (kin, cout, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if kin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {cin} channels, kernel expects {kin}"),
            ));
        }
        let bad = || {
            Error::shape(
                "conv_transpose2d",
                format!("{h}x{wd} input, {kh}x{kw} kernel, stride {stride}, padding {padding}"),
            )
        };
        if stride == 0 || h == 0 || wd == 0 {
            return Err(bad());
        }
        let oh = ((h - 1) * stride + kh).checked_sub(2 * padding).ok_or_else(bad)?;
        let ow = ((wd - 1) * stride + kw).checked_sub(2 * padding).ok_or_else(bad)?;
        if oh == 0 || ow == 0 {
            return Err(bad());
        }
        let geom = ConvGeom::new(cout, oh, ow, kh, kw, stride, padding)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(bad)?;
        let y = kernels::conv_transpose_forward(xv.data(), n, wv.data(), cin, &geom);
        let y = Tensor::new(vec![n, cout, oh, ow], y)?;
        let rg = self.rg(&[x, w]);
        self.push(y, Op::ConvTranspose2d { x, w, geom }, rg, "conv_transpose2d")
    }

    /// Max pooling over `k x k` windows. Ties resolve to the first window
    /// position in row-major order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape("maxpool2d", "expected 4-D input"));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if k == 0 || stride == 0 || h < k || w < k || h % stride != 0 || w % stride != 0 || (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("{h}x{w} input not divisible for window {k}, stride {stride}"),
            ));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let y = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::MaxPool { x, argmax }, rg, "maxpool2d")
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", format!("{sa:?} ++ {sb:?}")));
        }
        let n = sa[0];
        let (la, lb) = (av.len() / n, bv.len() / n);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&bv.data()[i * lb..(i + 1) * lb]);
        }
        let y = Tensor::new(vec![n, sa[1] + sb[1], sa[2], sa[3]], data)?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::ConcatChannels(a, b), rg, "concat_channels")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm over all elements. The gradient at the origin is taken to be zero.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).l2_norm());
        let rg = self.rg(&[a]);
        self.push(v, Op::L2Norm(a), rg, "l2_norm")
    }

    /// Mean per-pixel cross-entropy of `[N, K, H, W]` logits against class indices
    /// laid out as `[N, H, W]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 4 {
            return Err(Error::shape("softmax_cross_entropy", "expected [N, K, H, W] logits"));
        }
        let (n, k, h, w) = (lv.shape()[0], lv.shape()[1], lv.shape()[2], lv.shape()[3]);
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {} pixels", labels.len(), n * plane),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: k,
            });
        }
        let probs = softmax_channels(lv);
        let mut loss = 0.0;
        for s in 0..n {
            for p in 0..plane {
                loss -= log_softmax_at(lv.data(), s, k, plane, p, labels[s * plane + p]);
            }
        }
        let loss = Tensor::scalar(loss / (n * plane) as f64);
        let rg = self.rg(&[logits]);
        self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Same as [`Tape::softmax_cross_entropy`] with a one-hot `[N, K, H, W]` target.
    pub fn softmax_cross_entropy_onehot(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if target.shape() != lv.shape() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs target {:?}", lv.shape(), target.shape()),
            ));
        }
        let labels = onehot_to_labels(target)?;
        self.softmax_cross_entropy(logits, &labels)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// reachable from `loss` that requires them; fan-out accumulates.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, node)| g.map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("gradient shape")))
                .collect(),
        })
    }

    fn wants(&self, v: Var, id: usize) -> bool {
        debug_assert!(v.0 < id, "tape is not topologically ordered");
        self.nodes[v.0].requires_grad
    }

    /// Sums `g` (shaped like `a`) down onto the broadcast operand `b`.
    fn reduce_broadcast(g: &[f64], b_len: usize) -> Vec<f64> {
        if g.len() == b_len {
            return g.to_vec();
        }
        let mut out = vec![0.0; b_len];
        for chunk in g.chunks(b_len) {
            out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a, id) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b, id) {
                    let bl = self.value(*b).len();
                    accumulate(&mut grads[b.0], Self::reduce_broadcast(g, bl));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a, id) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b, id) {
                    let bl = self.value(*b).len();
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], Self::reduce_broadcast(&neg, bl));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a, id) {
                    let ga = g
                        .chunks(bv.len().max(1))
                        .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x * y))
                        .collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b, id) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], Self::reduce_broadcast(&prod, bv.len()));
                }
            }
            Op::Neg(a) => {
                if self.wants(*a, id) {
                    accumulate(&mut grads[a.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a, id) {
                    accumulate(&mut grads[a.0], g.iter().map(|v| v * f).collect());
                }
            }
            Op::Relu(a) => {
                if self.wants(*a, id) {
                    let out = node.value.data();
                    let ga = g.iter().zip(out).map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.wants(*x, id) {
                    let xv = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(gv, v)| if *v >= *lo && *v <= *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::BiasAdd { x, bias } => {
                if self.wants(*x, id) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.wants(*bias, id) {
                    let s = node.value.shape();
                    let (c, plane) = (s[1], s[2] * s[3]);
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, filters) = (xv.shape()[0], wv.shape()[0]);
                if self.wants(*x, id) {
                    let gx = kernels::conv_backward_input(g, batch, wv.data(), filters, geom);
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*w, id) {
                    let gw = kernels::conv_backward_kernel(xv.data(), g, batch, filters, geom);
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, cin) = (xv.shape()[0], wv.shape()[0]);
                if self.wants(*x, id) {
                    let gx = kernels::conv_transpose_backward_input(g, batch, wv.data(), cin, geom);
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*w, id) {
                    let gw = kernels::conv_transpose_backward_kernel(xv.data(), g, batch, cin, geom);
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x, id) {
                    let len = self.value(*x).len();
                    accumulate_with(&mut grads[x.0], len, |gx| {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            gx[src] += gv;
                        }
                    });
                }
            }
            Op::ConcatChannels(a, b) => {
                let n = node.value.shape()[0];
                let (la, lb) = (self.value(*a).len() / n, self.value(*b).len() / n);
                if self.wants(*a, id) {
                    let ga = (0..n).flat_map(|i| g[i * (la + lb)..i * (la + lb) + la].iter().copied()).collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b, id) {
                    let gb = (0..n)
                        .flat_map(|i| g[i * (la + lb) + la..(i + 1) * (la + lb)].iter().copied())
                        .collect();
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a, id) {
                    let len = self.value(*a).len();
                    accumulate(&mut grads[a.0], vec![g[0]; len]);
                }
            }
            Op::L2Norm(a) => {
                if self.wants(*a, id) {
                    let norm = node.value.data()[0];
                    let av = self.value(*a).data();
                    let ga = if norm > 0.0 {
                        av.iter().map(|v| g[0] * v / norm).collect()
                    } else {
                        vec![0.0; av.len()]
                    };
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                if self.wants(*logits, id) {
                    let s = self.value(*logits).shape();
                    let (k, plane) = (s[1], s[2] * s[3]);
                    let scale = g[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &label) in labels.iter().enumerate() {
                        let (sample, p) = (i / plane, i % plane);
                        gl[(sample * k + label) * plane + p] -= scale;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }
    }
}

/// `log softmax(logits)[label]` at one pixel, stabilised by max-subtraction.
fn log_softmax_at(data: &[f64], sample: usize, k: usize, plane: usize, p: usize, label: usize) -> f64 {
    let at = |c: usize| data[(sample * k + c) * plane + p];
    let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
    let lse = (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln() + max;
    at(label) - lse
}

/// Per-pixel softmax over the channel axis of an `[N, K, H, W]` tensor.
pub fn softmax_channels(logits: &Tensor) -> Vec<f64> {
    let s = logits.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let data = logits.data();
    let mut out = vec![0.0; data.len()];
    let mut max = vec![0.0; plane];
    let mut denom = vec![0.0; plane];
    for sample in 0..n {
        let base = sample * k * plane;
        max.fill(f64::NEG_INFINITY);
        denom.fill(0.0);
        for c in 0..k {
            let row = &data[base + c * plane..base + (c + 1) * plane];
            max.iter_mut().zip(row).for_each(|(m, v)| *m = m.max(*v));
        }
        for c in 0..k {
            let row = &data[base + c * plane..base + (c + 1) * plane];
            let dst = &mut out[base + c * plane..base + (c + 1) * plane];
            for p in 0..plane {
                dst[p] = (row[p] - max[p]).exp();
                denom[p] += dst[p];
            }
        }
        for c in 0..k {
            let dst = &mut out[base + c * plane..base + (c + 1) * plane];
            dst.iter_mut().zip(&denom).for_each(|(v, d)| *v /= d);
        }
    }
    out
}

/// Converts a one-hot `[N, K, H, W]` tensor to `[N, H, W]` class indices.
pub fn onehot_to_labels(target: &Tensor) -> Result<Vec<usize>> {
    if target.ndim() != 4 {
        return Err(Error::shape("onehot", "expected [N, K, H, W] target"));
    }
    let s = target.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let mut labels = Vec::with_capacity(n * plane);
    for sample in 0..n {
        for p in 0..plane {
            let mut hot = None;
            for c in 0..k {
                let v = target.data()[(sample * k + c) * plane + p];
                if v == 1.0 && hot.is_none() {
                    hot = Some(c);
                } else if v != 0.0 {
                    return Err(Error::NotOneHot { pixel: sample * plane + p });
                }
            }
            labels.push(hot.ok_or(Error::NotOneHot { pixel: sample * plane + p })?);
        }
    }
    Ok(labels)
}

/// One-hot encodes `[N, H, W]` labels into `[N, K, H, W]`.
pub fn labels_to_onehot(labels: &[usize], n: usize, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::shape("onehot", format!("{} labels for {n}x{h}x{w}", labels.len())));
    }
    let mut data = vec![0.0; n * k * plane];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, num_classes: k });
        }
        data[((i / plane) * k + label) * plane + i % plane] = 1.0;
    }
    Tensor::new(vec![n, k, h, w], data)
}
