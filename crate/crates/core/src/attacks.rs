//! First-order adversarial attacks on segmentation loss: FGSM, BIM and PGD
//! under L2 or L∞ budgets.
//!
//! PGD iterates on the adversarial image: with `δ = x_adv − x`, one step is
//! `x_adv ← clamp(x + project(δ + step(∇)), 0, 1)`. Because the clamp only
//! moves pixels towards `x`, the ball constraint survives it.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::SegModel;
use crate::rng;
use crate::tensor::Tensor;

/// Anything that can report a scalar loss and its gradient w.r.t. an image.
pub trait LossGradient: Sync {
    fn loss_and_grad(&self, image: &Tensor, mask: &Mask) -> Result<(f64, Tensor)>;
}

impl LossGradient for SegModel {
    fn loss_and_grad(&self, image: &Tensor, mask: &Mask) -> Result<(f64, Tensor)> {
        self.loss_and_input_grad(image, mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    L2,
    Linf,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    pub fn of(self, t: &Tensor) -> f64 {
        match self {
            Norm::L2 => t.l2_norm(),
            Norm::Linf => t.linf_norm(),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::invalid(format!("unknown norm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Init {
    #[default]
    Zero,
    RandomInBall,
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zero" => Ok(Init::Zero),
            "random" | "random_in_ball" => Ok(Init::RandomInBall),
            other => Err(Error::invalid(format!("unknown attack init `{other}`"))),
        }
    }
}

/// PGD parameters. Pixel units are `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub init: Init,
    /// Seed for random-in-ball starts.
    pub seed: u64,
}

impl AttackSpec {
    /// ε = 8/255, α = 2/255, 10 steps.
    pub fn pgd_linf() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            init: Init::Zero,
            seed: 0,
        }
    }

    /// ε = 10, α = 0.1, 10 steps.
    pub fn pgd_l2() -> Self {
        Self {
            norm: Norm::L2,
            epsilon: 10.0,
            alpha: 0.1,
            steps: 10,
            init: Init::Zero,
            seed: 0,
        }
    }

    pub fn new(norm: Norm, epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            norm,
            epsilon,
            alpha,
            steps,
            init: Init::Zero,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("attack epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("attack alpha must be positive, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("attack steps must be at least 1"));
        }
        Ok(())
    }

    /// Short label such as `pgd_linf`, used in tables and manifests.
    pub fn tag(&self) -> String {
        format!("pgd_{}", self.norm)
    }
}

/// Maps `delta` onto the `epsilon`-ball of `norm`.
pub fn project(delta: &Tensor, norm: Norm, epsilon: f64) -> Tensor {
    match norm {
        Norm::Linf => delta.map(|v| v.clamp(-epsilon, epsilon)),
        Norm::L2 => {
            let n = delta.l2_norm();
            if n > epsilon {
                let s = epsilon / n;
                delta.map(|v| v * s)
            } else {
                delta.clone()
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ascent_step(grad: &Tensor, norm: Norm, alpha: f64) -> Tensor {
    match norm {
        Norm::Linf => grad.map(|g| alpha * sign(g)),
        Norm::L2 => {
            let s = alpha / grad.l2_norm().max(1e-12);
            grad.map(|g| g * s)
        }
    }
}

fn check_pair(image: &Tensor, mask: &Mask) -> Result<()> {
    if image.ndim() != 3 || image.shape()[1] != mask.height() || image.shape()[2] != mask.width() {
        return Err(Error::shape(
            "attack",
            format!("image {:?} vs mask {}x{}", image.shape(), mask.height(), mask.width()),
        ));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("attack input must lie in [0, 1]"));
    }
    Ok(())
}

fn random_in_ball(shape: &[usize], norm: Norm, epsilon: f64, seed: u64, index: u64) -> Tensor {
    let mut r = rng::stream(rng::derive(seed, "attack-init", index), 0);
    let n: usize = shape.iter().product();
    let data = match norm {
        Norm::Linf => (0..n).map(|_| r.gen_range(-epsilon..=epsilon)).collect(),
        Norm::L2 => {
            let dir: Vec<f64> = (0..n)
                .map(|_| {
                    let u1: f64 = r.gen::<f64>().max(1e-300);
                    let u2: f64 = r.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let radius = epsilon * r.gen::<f64>().powf(1.0 / n as f64);
            dir.into_iter().map(|v| v * radius / len).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// PGD on one image. `observer` sees `(iteration, δ, x_adv)` after every
/// step. `index` selects the random stream for random-in-ball starts.
pub fn pgd_observed(
    model: &dyn LossGradient,
    image: &Tensor,
    mask: &Mask,
    spec: &AttackSpec,
    index: u64,
    observer: &mut dyn FnMut(usize, &Tensor, &Tensor),
) -> Result<Tensor> {
    spec.validate()?;
    check_pair(image, mask)?;
    let mut adv = match spec.init {
        Init::Zero => image.clone(),
        Init::RandomInBall => {
            let d = random_in_ball(image.shape(), spec.norm, spec.epsilon, spec.seed, index);
            image.zip_map(&d, |x, d| (x + d).clamp(0.0, 1.0))?
        }
    };
    for it in 0..spec.steps {
        let (_, grad) = model.loss_and_grad(&adv, mask)?;
        grad.ensure_finite("attack gradient")?;
        let step = ascent_step(&grad, spec.norm, spec.alpha);
        let delta = adv.zip_map(image, |a, x| a - x)?.zip_map(&step, |d, s| d + s)?;
        let delta = project(&delta, spec.norm, spec.epsilon);
        adv = image.zip_map(&delta, |x, d| (x + d).clamp(0.0, 1.0))?;
        let actual = adv.zip_map(image, |a, x| a - x)?;
        observer(it, &actual, &adv);
    }
    Ok(adv)
}

/// PGD on one image.
pub fn pgd_single(model: &dyn LossGradient, image: &Tensor, mask: &Mask, spec: &AttackSpec, index: u64) -> Result<Tensor> {
    pgd_observed(model, image, mask, spec, index, &mut |_, _, _| {})
}

fn check_batch(images: &[Tensor], masks: &[Mask]) -> Result<()> {
    if images.len() != masks.len() {
        return Err(Error::shape("attack", format!("{} images vs {} masks", images.len(), masks.len())));
    }
    Ok(())
}

/// PGD on each image independently. Image `i` uses random stream `first_index + i`.
pub fn pgd(
    model: &dyn LossGradient,
    images: &[Tensor],
    masks: &[Mask],
    spec: &AttackSpec,
    first_index: u64,
    exec: Execution,
) -> Result<Vec<Tensor>> {
    check_batch(images, masks)?;
    exec.map(images.len(), |i| pgd_single(model, &images[i], &masks[i], spec, first_index + i as u64))
}

/// `clamp(x + ε·sign(∇x L), 0, 1)` on one image; `epsilon` may be zero.
pub fn fgsm_single(model: &dyn LossGradient, image: &Tensor, mask: &Mask, epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("fgsm epsilon must be non-negative, got {epsilon}")));
    }
    check_pair(image, mask)?;
    let (_, grad) = model.loss_and_grad(image, mask)?;
    grad.ensure_finite("attack gradient")?;
    image.zip_map(&grad, |x, g| (x + epsilon * sign(g)).clamp(0.0, 1.0))
}

pub fn fgsm(model: &dyn LossGradient, images: &[Tensor], masks: &[Mask], epsilon: f64, exec: Execution) -> Result<Vec<Tensor>> {
    check_batch(images, masks)?;
    exec.map(images.len(), |i| fgsm_single(model, &images[i], &masks[i], epsilon))
}

/// Iterated sign steps of size `alpha`, keeping the running perturbation in
/// `[−ε, ε]` and the image in `[0, 1]` after every step.
pub fn bim_single(model: &dyn LossGradient, image: &Tensor, mask: &Mask, epsilon: f64, alpha: f64, steps: usize) -> Result<Tensor> {
    AttackSpec::new(Norm::Linf, epsilon, alpha, steps).validate()?;
    check_pair(image, mask)?;
    let mut adv = image.clone();
    for _ in 0..steps {
        let (_, grad) = model.loss_and_grad(&adv, mask)?;
        grad.ensure_finite("attack gradient")?;
        let mut next = adv.clone();
        for (((n, &a), &x), &g) in next.data_mut().iter_mut().zip(adv.data()).zip(image.data()).zip(grad.data()) {
            let delta = ((a - x) + alpha * sign(g)).clamp(-epsilon, epsilon);
            *n = (x + delta).clamp(0.0, 1.0);
        }
        adv = next;
    }
    Ok(adv)
}

pub fn bim(
    model: &dyn LossGradient,
    images: &[Tensor],
    masks: &[Mask],
    epsilon: f64,
    alpha: f64,
    steps: usize,
    exec: Execution,
) -> Result<Vec<Tensor>> {
    check_batch(images, masks)?;
    exec.map(images.len(), |i| bim_single(model, &images[i], &masks[i], epsilon, alpha, steps))
}

/// Loss `Σ w·x + b` summed over pixels, whose input gradient is `w`
/// everywhere. Used as a closed-form oracle for attack tests.
#[derive(Debug, Clone)]
pub struct LinearSurrogate {
    pub weights: Tensor,
}

impl LossGradient for LinearSurrogate {
    fn loss_and_grad(&self, image: &Tensor, _mask: &Mask) -> Result<(f64, Tensor)> {
        if image.shape() != self.weights.shape() {
            return Err(Error::shape("surrogate", format!("{:?} vs {:?}", image.shape(), self.weights.shape())));
        }
        Ok((image.dot(&self.weights), self.weights.clone()))
    }
}
