//! Robustified datasets by representation matching.
//!
//! For each training pair `(x, y)`, start from a different training image
//! and run normalised gradient descent on it so that its representation
//! under a robust model approaches that of `x`. The result keeps the label
//! `y`, so the new image carries mostly the features the robust model
//! relies on.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::attacks::{project, Norm};
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fsutil;
use crate::nn::{SegModel, REPRESENTATION_LAYER};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RobustifyConfig {
    pub steps: usize,
    /// L2 length of every pre-clamp update.
    pub step_norm: f64,
    pub seed: u64,
    pub layer: String,
    /// Optionally keep each image within a ball around its starting image.
    pub projection: Option<(Norm, f64)>,
}

impl Default for RobustifyConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_norm: 0.1,
            seed: 0,
            layer: REPRESENTATION_LAYER.to_string(),
            projection: None,
        }
    }
}

impl RobustifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("robustify steps must be at least 1"));
        }
        if !(self.step_norm > 0.0 && self.step_norm.is_finite()) {
            return Err(Error::invalid(format!("step_norm must be positive, got {}", self.step_norm)));
        }
        if let Some((_, eps)) = self.projection {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::invalid("projection radius must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let projection = match self.projection {
            Some((norm, eps)) => format!("{norm}:{eps}"),
            None => "none".into(),
        };
        format!(
            "steps={}\nstep_norm={}\nseed={}\nlayer={}\nprojection={projection}\n",
            self.steps, self.step_norm, self.seed, self.layer
        )
    }
}

/// `‖rep(z) − rep(x)‖₂` over all channels and positions of `layer`.
pub fn representation_distance(model: &SegModel, z: &Tensor, x: &Tensor, layer: &str) -> Result<f64> {
    if z.shape() != x.shape() {
        return Err(Error::shape("representation_distance", format!("{:?} vs {:?}", z.shape(), x.shape())));
    }
    let rz = model.representation(z, layer)?;
    let rx = model.representation(x, layer)?;
    Ok(rz.zip_map(&rx, |a, b| a - b)?.l2_norm())
}

/// A seeded permutation without fixed points (Sattolo's algorithm).
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least two samples to pair, got {n}")));
    }
    let mut r = rng::stream(rng::derive(seed, "pairing", 0), 0);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.gen_range(0..i);
        p.swap(i, j);
    }
    // Sattolo yields a single n-cycle; shuffle the labels so that the cycle
    // structure does not depend on n alone.
    let mut relabel: Vec<usize> = (0..n).collect();
    relabel.shuffle(&mut r);
    let mut out = vec![0; n];
    for i in 0..n {
        out[relabel[i]] = relabel[p[i]];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub initial_distance: f64,
    pub final_distance: f64,
}

/// Moves `start` towards the representation of `x` with `config.steps`
/// normalised descent steps, clamping to `[0, 1]` after each.
pub fn robustify_sample(model: &SegModel, x: &Tensor, start: &Tensor, config: &RobustifyConfig) -> Result<(Tensor, SampleTrace)> {
    robustify_sample_observed(model, x, start, config, &mut |_, _| {})
}

/// As [`robustify_sample`]; `observer` receives each pre-clamp update.
pub fn robustify_sample_observed(
    model: &SegModel,
    x: &Tensor,
    start: &Tensor,
    config: &RobustifyConfig,
    observer: &mut dyn FnMut(usize, &Tensor),
) -> Result<(Tensor, SampleTrace)> {
    config.validate()?;
    if x.shape() != start.shape() {
        return Err(Error::shape("robustify", format!("{:?} vs {:?}", x.shape(), start.shape())));
    }
    let target = model.representation(x, &config.layer)?;
    let mut xr = start.clone();
    let mut initial = None;
    for step in 0..config.steps {
        let (d, g) = model.representation_distance_and_grad(&xr, &target, &config.layer)?;
        g.ensure_finite("robustify gradient")?;
        initial.get_or_insert(d);
        let scale = config.step_norm / g.l2_norm().max(1e-12);
        let update = g.map(|v| -scale * v);
        observer(step, &update);
        let moved = xr.zip_map(&update, |a, u| a + u)?;
        xr = match config.projection {
            Some((norm, eps)) => {
                let off = project(&moved.zip_map(start, |a, s| a - s)?, norm, eps);
                start.zip_map(&off, |s, o| (s + o).clamp(0.0, 1.0))?
            }
            None => moved.map(|v| v.clamp(0.0, 1.0)),
        };
    }
    let final_rep = model.representation(&xr, &config.layer)?;
    let final_distance = final_rep.zip_map(&target, |a, b| a - b)?.l2_norm();
    Ok((
        xr,
        SampleTrace {
            initial_distance: initial.expect("at least one step"),
            final_distance,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustifyReport {
    /// `pairing[i]` is the index of the image item `i` started from.
    pub pairing: Vec<usize>,
    pub traces: Vec<SampleTrace>,
}

impl RobustifyReport {
    pub fn mean_initial(&self) -> f64 {
        self.traces.iter().map(|t| t.initial_distance).sum::<f64>() / self.traces.len() as f64
    }

    pub fn mean_final(&self) -> f64 {
        self.traces.iter().map(|t| t.final_distance).sum::<f64>() / self.traces.len() as f64
    }

    pub fn fraction_improved(&self) -> f64 {
        let n = self.traces.iter().filter(|t| t.final_distance < t.initial_distance).count();
        n as f64 / self.traces.len() as f64
    }
}

/// Replaces every image of `d` by its robustified counterpart. Masks and
/// split tags are kept as they are.
pub fn robustify_dataset(model: &SegModel, d: &LabeledDataset, config: &RobustifyConfig, exec: Execution) -> Result<(LabeledDataset, RobustifyReport)> {
    config.validate()?;
    if d.is_empty() {
        return Err(Error::Empty("dataset to robustify"));
    }
    let pairing = derangement(d.len(), config.seed)?;
    let results = exec.map(d.len(), |i| robustify_sample(model, &d.images[i], &d.images[pairing[i]], config))?;
    let mut out = d.clone();
    let mut traces = Vec::with_capacity(d.len());
    for (i, (img, trace)) in results.into_iter().enumerate() {
        out.images[i] = img;
        traces.push(trace);
    }
    Ok((out, RobustifyReport { pairing, traces }))
}

pub const PROVENANCE_FILE: &str = "provenance.txt";
pub const PROVENANCE_FORMAT_VERSION: u32 = 1;

/// Writes the dataset plus a provenance file naming the source model.
pub fn save_robustified(
    d: &LabeledDataset,
    dir: &Path,
    model: &SegModel,
    trained_attack: Option<&str>,
    config: &RobustifyConfig,
) -> Result<()> {
    data::save_dataset(d, dir)?;
    let text = format!(
        "format_version={PROVENANCE_FORMAT_VERSION}\nmodel_sha256={}\narchitecture={}\ntrained_attack={}\n{}",
        model.fingerprint(),
        model.config().architecture,
        trained_attack.unwrap_or("none"),
        config.to_text()
    );
    fsutil::atomic_write(&dir.join(PROVENANCE_FILE), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, ModelConfig};

    fn model() -> SegModel {
        SegModel::new(&ModelConfig {
            base_channels: 4,
            stages: 1,
            seed: 2,
            ..ModelConfig::new(Architecture::UNet)
        })
        .unwrap()
    }

    fn img(seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 0);
        Tensor::new(vec![3, 4, 4], (0..48).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for n in 2..40 {
            for seed in 0..5 {
                let p = derangement(n, seed).unwrap();
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
                assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            }
        }
        assert!(derangement(1, 0).is_err());
        assert_ne!(derangement(10, 1).unwrap(), derangement(10, 2).unwrap());
    }

    #[test]
    fn distance_basics() {
        let m = model();
        let (a, b) = (img(1), img(2));
        assert_eq!(representation_distance(&m, &a, &a, REPRESENTATION_LAYER).unwrap(), 0.0);
        let ab = representation_distance(&m, &a, &b, REPRESENTATION_LAYER).unwrap();
        let ba = representation_distance(&m, &b, &a, REPRESENTATION_LAYER).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn single_step_has_exact_length() {
        let m = model();
        let cfg = RobustifyConfig {
            steps: 1,
            ..RobustifyConfig::default()
        };
        let mut norms = Vec::new();
        robustify_sample_observed(&m, &img(1), &img(2), &cfg, &mut |_, u| norms.push(u.l2_norm())).unwrap();
        assert_eq!(norms.len(), 1);
        assert!((norms[0] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(RobustifyConfig { steps: 0, ..RobustifyConfig::default() }.validate().is_err());
        assert!(RobustifyConfig { step_norm: 0.0, ..RobustifyConfig::default() }.validate().is_err());
    }

    #[test]
    fn projection_keeps_image_near_start() {
        let m = model();
        let cfg = RobustifyConfig {
            steps: 5,
            projection: Some((Norm::Linf, 0.02)),
            ..RobustifyConfig::default()
        };
        let start = img(2);
        let (out, _) = robustify_sample(&m, &img(1), &start, &cfg).unwrap();
        let off = out.zip_map(&start, |a, b| a - b).unwrap();
        assert!(off.linf_norm() <= 0.02 + 1e-12);
    }
}
