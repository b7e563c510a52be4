//! Central finite-difference verification of tape gradients.
//!
//! [`check_graph`] compares the reverse-mode gradient of
//! `sum(f(inputs) * P)` (with `P` a fixed random projection) against
//! central differences for every input coordinate. [`op_suite`] runs it
//! over randomly shaped cases of every differentiable tape op.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::attacks::LossGradient;
use crate::autodiff::{Tape, Var};
use crate::data::Mask;
use crate::error::Result;
use crate::nn::SegModel;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
    /// Finite-difference step.
    pub step: f64,
}

impl Tolerance {
    pub const OPS: Tolerance = Tolerance {
        rtol: 1e-4,
        atol: 1e-9,
        step: 1e-6,
    };
    pub const MODEL: Tolerance = Tolerance {
        rtol: 1e-3,
        atol: 1e-8,
        step: 1e-5,
    };

    /// `|a - n|` as a fraction of the allowed error; at most 1 passes.
    pub fn ratio(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / (self.rtol * analytic.abs().max(numeric.abs()) + self.atol)
    }
}

/// Outcome of checking many coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckStats {
    pub coordinates: usize,
    /// Largest [`Tolerance::ratio`] seen.
    pub worst: f64,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst_pair: (f64, f64),
}

impl CheckStats {
    pub fn passed(&self) -> bool {
        self.worst <= 1.0
    }

    fn record(&mut self, tol: &Tolerance, a: f64, n: f64) {
        let r = tol.ratio(a, n);
        self.coordinates += 1;
        if r > self.worst || r.is_nan() {
            self.worst = if r.is_nan() { f64::INFINITY } else { r };
            self.worst_pair = (a, n);
        }
    }

    fn merge(&mut self, other: &CheckStats) {
        self.coordinates += other.coordinates;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_pair = other.worst_pair;
        }
    }
}

type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn projected_loss(build: &Graph, values: &[Tensor], proj: &Tensor) -> Result<(Tape, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let vars = values
        .iter()
        .map(|v| tape.leaf(v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let p = tape.constant(proj.clone())?;
    let prod = tape.mul(out, p)?;
    let loss = tape.sum(prod)?;
    Ok((tape, loss, vars))
}

/// Checks every coordinate of every input of the graph built by `build`.
pub fn check_graph(build: &Graph, inputs: &[Tensor], proj_seed: u64, tol: &Tolerance) -> Result<CheckStats> {
    let shape = {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|v| tape.leaf(v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let proj = uniform(&mut rng::stream(proj_seed, 1), &shape);
    let (tape, loss, vars) = projected_loss(build, inputs, &proj)?;
    let mut grads = tape.backward(loss)?;
    let value = |values: &[Tensor]| -> Result<f64> {
        let (tape, loss, _) = projected_loss(build, values, &proj)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut stats = CheckStats::default();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.take(*var).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let mut moved = inputs.to_vec();
            moved[i].data_mut()[j] += tol.step;
            let up = value(&moved)?;
            moved[i].data_mut()[j] -= 2.0 * tol.step;
            let down = value(&moved)?;
            stats.record(tol, analytic.data()[j], (up - down) / (2.0 * tol.step));
        }
    }
    Ok(stats)
}

/// Uniform values in `[-1, 1)`.
pub fn uniform(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values with pairwise gaps of 0.01, shuffled, so max-pooling has no
/// near-ties within a finite-difference step.
fn distinct(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).expect("shape")
}

/// Moves coordinates within 1e-3 of a kink off it.
fn avoid(t: Tensor, kinks: &[f64]) -> Tensor {
    t.map(|v| kinks.iter().fold(v, |v, &k| if (v - k).abs() < 1e-3 { k + 0.01 } else { v }))
}

fn nchw(r: &mut Rng) -> [usize; 4] {
    [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(2..=5), r.gen_range(2..=5)]
}

fn random_nchw(r: &mut Rng) -> Tensor {
    let s = nchw(r);
    uniform(r, &s)
}

/// One randomly drawn case: op name, inputs and graph.
type Case = (&'static str, Vec<Tensor>, Box<Graph<'static>>);

fn draw(op: &'static str, r: &mut Rng) -> Case {
    match op {
        "add" | "sub" | "mul" => {
            let s = nchw(r);
            let a = uniform(r, &s);
            let tail = r.gen_range(0..=3);
            let b = uniform(r, &s[tail..]);
            let g: Box<Graph> = match op {
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (op, vec![a, b], g)
        }
        "neg" => (op, vec![random_nchw(r)], Box::new(|t, v| t.neg(v[0]))),
        "scale" => {
            let f = r.gen_range(-3.0..3.0);
            (op, vec![random_nchw(r)], Box::new(move |t, v| t.scale(v[0], f)))
        }
        "relu" => (op, vec![avoid(random_nchw(r), &[0.0])], Box::new(|t, v| t.relu(v[0]))),
        "clamp" => {
            let (lo, hi) = (r.gen_range(-0.8..-0.1), r.gen_range(0.1..0.8));
            let x = avoid(random_nchw(r), &[lo, hi]);
            (op, vec![x], Box::new(move |t, v| t.clamp(v[0], lo, hi)))
        }
        "bias_add" => {
            let s = nchw(r);
            let (x, b) = (uniform(r, &s), uniform(r, &[s[1]]));
            (op, vec![x, b], Box::new(|t, v| t.bias_add(v[0], v[1])))
        }
        "conv2d" => {
            let k = r.gen_range(1..=3);
            let stride = r.gen_range(1..=2);
            let (n, c, f) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
            // input sizes the strided window tiles exactly
            let (oh, ow) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let span = (oh.min(ow) - 1) * stride + k;
            let pad = r.gen_range(0..k).min((span - 1) / 2);
            let (h, w) = ((oh - 1) * stride + k - 2 * pad, (ow - 1) * stride + k - 2 * pad);
            let x = uniform(r, &[n, c, h, w]);
            let wt = uniform(r, &[f, c, k, k]);
            (op, vec![x, wt], Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)))
        }
        "conv_transpose2d" => {
            let k = r.gen_range(1..=3);
            let stride = r.gen_range(1..=2);
            let (n, c, f) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
            let (h, w) = (r.gen_range(2..=4), r.gen_range(2..=4));
            let span = (h.min(w) - 1) * stride + k;
            let pad = r.gen_range(0..k).min((span - 1) / 2);
            let x = uniform(r, &[n, c, h, w]);
            let wt = uniform(r, &[c, f, k, k]);
            (op, vec![x, wt], Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], stride, pad)))
        }
        "maxpool2d" => {
            let s = [r.gen_range(1..=2), r.gen_range(1..=3), 2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3)];
            (op, vec![distinct(r, &s)], Box::new(|t, v| t.maxpool2d(v[0], 2, 2)))
        }
        "concat_channels" => {
            let s = nchw(r);
            let a = uniform(r, &s);
            let cb = r.gen_range(1..=3);
            let b = uniform(r, &[s[0], cb, s[2], s[3]]);
            (op, vec![a, b], Box::new(|t, v| t.concat_channels(v[0], v[1])))
        }
        "sum" => (op, vec![random_nchw(r)], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (op, vec![random_nchw(r)], Box::new(|t, v| t.mean(v[0]))),
        "l2_norm" => (op, vec![random_nchw(r)], Box::new(|t, v| t.l2_norm(v[0]))),
        "softmax_cross_entropy" => {
            let s = [r.gen_range(1..=2), r.gen_range(2..=5), r.gen_range(1..=4), r.gen_range(1..=4)];
            let logits = uniform(r, &s).map(|v| 3.0 * v);
            let labels: Vec<usize> = (0..s[0] * s[2] * s[3]).map(|_| r.gen_range(0..s[1])).collect();
            (op, vec![logits], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)))
        }
        other => panic!("no generator for {other}"),
    }
}

/// Every differentiable op on [`Tape`].
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "clamp",
    "bias_add",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "concat_channels",
    "sum",
    "mean",
    "l2_norm",
    "softmax_cross_entropy",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub stats: CheckStats,
}

/// Runs `cases` random cases of every op in [`OPS`].
pub fn op_suite(cases: usize, seed: u64, tol: &Tolerance) -> Result<Vec<OpReport>> {
    OPS.iter()
        .map(|&op| {
            let mut stats = CheckStats::default();
            for case in 0..cases as u64 {
                let mut r = rng::stream(rng::derive(seed, op, case), 0);
                let (_, inputs, graph) = draw(op, &mut r);
                stats.merge(&check_graph(graph.as_ref(), &inputs, rng::derive(seed, "proj", case), tol)?);
            }
            Ok(OpReport { op, cases, stats })
        })
        .collect()
}

/// Compares [`LossGradient`] input gradients against central differences
/// of its loss at `points` random pixels.
pub fn input_gradient_check(model: &dyn LossGradient, image: &Tensor, mask: &Mask, points: usize, seed: u64, tol: &Tolerance) -> Result<CheckStats> {
    let (_, grad) = model.loss_and_grad(image, mask)?;
    let mut r = rng::stream(seed, 2);
    let mut stats = CheckStats::default();
    for _ in 0..points {
        let j = r.gen_range(0..image.len());
        let mut x = image.clone();
        x.data_mut()[j] += tol.step;
        let up = model.loss_and_grad(&x, mask)?.0;
        x.data_mut()[j] -= 2.0 * tol.step;
        let down = model.loss_and_grad(&x, mask)?.0;
        stats.record(tol, grad.data()[j], (up - down) / (2.0 * tol.step));
    }
    Ok(stats)
}

/// Parameter-gradient spot checks: `per_tensor` random coordinates of every
/// parameter tensor.
pub fn parameter_gradient_check(model: &SegModel, image: &Tensor, mask: &Mask, per_tensor: usize, seed: u64, tol: &Tolerance) -> Result<CheckStats> {
    let (_, grads, _) = model.loss_and_param_grads(image, mask)?;
    let mut r = rng::stream(seed, 3);
    let mut stats = CheckStats::default();
    let mut m = model.clone();
    for (pi, g) in grads.iter().enumerate() {
        for _ in 0..per_tensor {
            let j = r.gen_range(0..g.len());
            let orig = m.params()[pi].data()[j];
            m.params_mut()[pi].data_mut()[j] = orig + tol.step;
            let up = m.loss_and_param_grads(image, mask)?.0;
            m.params_mut()[pi].data_mut()[j] = orig - tol.step;
            let down = m.loss_and_param_grads(image, mask)?.0;
            m.params_mut()[pi].data_mut()[j] = orig;
            stats.record(tol, g.data()[j], (up - down) / (2.0 * tol.step));
        }
    }
    Ok(stats)
}
