//! Procedural off-road scenes with pixel-exact labels, plus dataset
//! merging, splitting, augmentation and on-disk persistence.
//!
//! Scenes are layered: sky above a noisy horizon, a tree-line vegetation
//! band, grass and dirt ground, a trail narrowing towards the horizon,
//! puddles, rocks, bushes and tree trunks. Colours of several classes
//! overlap on purpose (trail/dirt/trunk browns, the three greens), so that
//! texture and spatial context are needed to separate them.

use std::fmt;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fsutil;
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Class names indexed by label.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Background",
    "Vegetation",
    "Traversable grass",
    "Smooth trail",
    "Obstacle",
    "Sky",
    "Rough trail",
    "Puddle",
    "Non Traversable Vegetation",
    "Tree",
];

pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const VEGETATION: u8 = 1;
    pub const GRASS: u8 = 2;
    pub const SMOOTH_TRAIL: u8 = 3;
    pub const OBSTACLE: u8 = 4;
    pub const SKY: u8 = 5;
    pub const ROUGH_TRAIL: u8 = 6;
    pub const PUDDLE: u8 = 7;
    pub const NON_TRAVERSABLE: u8 = 8;
    pub const TREE: u8 = 9;
}

/// Display colours for label maps.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [34, 139, 34],
    [154, 205, 50],
    [210, 180, 140],
    [255, 0, 0],
    [135, 206, 235],
    [139, 69, 19],
    [0, 0, 255],
    [0, 100, 0],
    [128, 0, 128],
];

/// A 2-D map of class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} mask with {} labels", labels.len()),
            ));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Paired `[3, H, W]` images in `[0, 1]` and label masks, with split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub masks: Vec<Mask>,
    pub splits: Vec<Split>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, masks: Vec<Mask>, splits: Vec<Split>) -> Result<Self> {
        let d = Self {
            images,
            masks,
            splits,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn empty() -> Self {
        Self {
            images: Vec::new(),
            masks: Vec::new(),
            splits: Vec::new(),
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Checks index alignment, image/mask shapes, label range and pixel range.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.masks.len() || self.images.len() != self.splits.len() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} images, {} masks, {} split tags",
                    self.images.len(),
                    self.masks.len(),
                    self.splits.len()
                ),
            ));
        }
        let k = self.num_classes();
        for (i, (img, mask)) in self.images.iter().zip(&self.masks).enumerate() {
            if img.shape() != [3, mask.height(), mask.width()] {
                return Err(Error::shape(
                    "dataset",
                    format!("item {i}: image {:?} vs mask {}x{}", img.shape(), mask.height(), mask.width()),
                ));
            }
            if let Some(&l) = mask.labels().iter().find(|&&l| l as usize >= k) {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    num_classes: k,
                });
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("item {i}: pixel outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// The items of one split, in dataset order.
    pub fn subset(&self, split: Split) -> LabeledDataset {
        self.select(&self.indices(split))
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<u64> {
        let mut h = vec![0; self.num_classes()];
        for m in &self.masks {
            h.iter_mut().zip(m.histogram(self.num_classes())).for_each(|(a, b)| *a += b);
        }
        h
    }
}

/// Parameters of the procedural scene generator. Ranges are `(lo, hi)` and
/// expressed as fractions of the image side unless noted.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub horizon_band: (f64, f64),
    pub trail_width_range: (f64, f64),
    /// Inclusive count range.
    pub obstacle_count_range: (usize, usize),
    /// Inclusive count range.
    pub tree_count_range: (usize, usize),
    pub puddle_probability: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub texture_noise_scale: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            horizon_band: (0.15, 0.38),
            trail_width_range: (0.16, 0.32),
            obstacle_count_range: (0, 2),
            tree_count_range: (1, 3),
            puddle_probability: 0.6,
            texture_noise_scale: 0.03,
        }
    }
}

impl SceneSpec {
    /// Dense woodland: more trees, narrower trails, fewer puddles.
    pub fn forest(seed: u64) -> Self {
        Self {
            seed,
            horizon_band: (0.12, 0.3),
            trail_width_range: (0.12, 0.24),
            tree_count_range: (2, 4),
            puddle_probability: 0.45,
            ..Self::default()
        }
    }

    /// Open trail country: wide trails, puddles and rocks.
    pub fn trail(seed: u64) -> Self {
        Self {
            seed,
            horizon_band: (0.2, 0.42),
            trail_width_range: (0.2, 0.36),
            obstacle_count_range: (1, 3),
            tree_count_range: (0, 2),
            puddle_probability: 0.75,
            ..Self::default()
        }
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if !(lo < hi && lo >= 0.0 && hi <= 1.0) {
                Err(Error::invalid(format!("{name} range ({lo}, {hi}) is degenerate")))
            } else {
                Ok(())
            }
        };
        range("horizon_band", self.horizon_band)?;
        range("trail_width", self.trail_width_range)?;
        if self.horizon_band.0 < 0.05 || self.horizon_band.1 > 0.6 {
            return Err(Error::invalid("horizon_band must lie within [0.05, 0.6]"));
        }
        if self.obstacle_count_range.0 > self.obstacle_count_range.1 || self.tree_count_range.0 > self.tree_count_range.1 {
            return Err(Error::invalid("count range has lo > hi"));
        }
        if !(0.0..=1.0).contains(&self.puddle_probability) {
            return Err(Error::invalid("puddle_probability must be in [0, 1]"));
        }
        if !(self.texture_noise_scale >= 0.0 && self.texture_noise_scale.is_finite()) {
            return Err(Error::invalid("texture_noise_scale must be non-negative"));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::invalid(format!(
                "image_size {} must be a multiple of 8 and at least 16",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Smooth lattice noise in `[-1, 1]`.
struct ValueNoise {
    seed: u64,
}

impl ValueNoise {
    fn lattice(&self, ix: i64, iy: i64) -> f64 {
        let mut h = self.seed ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
        h = (h ^ (h >> 31)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 29)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 32;
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    /// Noise at `(x, y)` in unit coordinates with `freq` cells per side.
    fn at(&self, x: f64, y: f64, freq: f64) -> f64 {
        let (fx, fy) = (x * freq, y * freq);
        let (ix, iy) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - ix, fy - iy);
        let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let (ix, iy) = (ix as i64, iy as i64);
        let a = self.lattice(ix, iy);
        let b = self.lattice(ix + 1, iy);
        let c = self.lattice(ix, iy + 1);
        let d = self.lattice(ix + 1, iy + 1);
        let top = a + (b - a) * sx;
        let bottom = c + (d - c) * sx;
        top + (bottom - top) * sy
    }
}

#[derive(Clone, Copy)]
struct Material {
    rgb: [f64; 3],
    /// `(frequency, amplitude)` of a luminance texture.
    coarse: (f64, f64),
    fine: (f64, f64),
}

fn material(label: u8) -> Material {
    let m = |rgb, coarse, fine| Material { rgb, coarse, fine };
    match label {
        class::BACKGROUND => m([0.46, 0.39, 0.31], (6.0, 0.07), (24.0, 0.05)),
        class::VEGETATION => m([0.22, 0.40, 0.18], (10.0, 0.10), (20.0, 0.04)),
        class::GRASS => m([0.40, 0.52, 0.24], (5.0, 0.04), (40.0, 0.06)),
        class::SMOOTH_TRAIL => m([0.53, 0.45, 0.34], (3.0, 0.03), (30.0, 0.01)),
        class::OBSTACLE => m([0.47, 0.44, 0.40], (8.0, 0.05), (20.0, 0.03)),
        class::SKY => m([0.62, 0.75, 0.92], (3.0, 0.03), (12.0, 0.01)),
        class::ROUGH_TRAIL => m([0.51, 0.43, 0.33], (6.0, 0.05), (48.0, 0.16)),
        class::PUDDLE => m([0.36, 0.42, 0.48], (4.0, 0.03), (30.0, 0.01)),
        class::NON_TRAVERSABLE => m([0.18, 0.33, 0.15], (16.0, 0.08), (48.0, 0.12)),
        _ => m([0.33, 0.25, 0.18], (5.0, 0.03), (60.0, 0.05)),
    }
}

fn uniform(r: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * r.gen::<f64>()
}

fn count_in(r: &mut rng::Rng, (lo, hi): (usize, usize)) -> usize {
    r.gen_range(lo..=hi)
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Renders scene `index` of `spec`. Pure in `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(Tensor, Mask)> {
    spec.validate()?;
    let s = spec.image_size;
    let sf = s as f64;
    let mut r = rng::stream(spec.seed, index);
    let noise = ValueNoise {
        seed: rng::derive(spec.seed, "scene-noise", index),
    };
    let mut mask = Mask::filled(s, s, class::BACKGROUND);
    let px = |i: usize| (i as f64 + 0.5) / sf;

    // Horizon and tree line.
    let h0 = uniform(&mut r, spec.horizon_band);
    let (hf, hp) = (uniform(&mut r, (0.5, 2.0)), uniform(&mut r, (0.0, 1.0)));
    let band = uniform(&mut r, (0.08, 0.16));
    let horizon: Vec<f64> = (0..s)
        .map(|x| {
            let u = px(x);
            (h0 + 0.04 * (std::f64::consts::TAU * (hf * u + hp)).sin() + 0.03 * noise.at(u, 0.1, 5.0)).max(0.06)
        })
        .collect();
    let treeline: Vec<f64> = (0..s)
        .map(|x| horizon[x] + band + 0.05 * noise.at(px(x), 0.7, 7.0))
        .collect();
    let dirt_threshold = uniform(&mut r, (0.25, 0.55));
    for y in 0..s {
        let v = px(y);
        for x in 0..s {
            let u = px(x);
            let label = if v < horizon[x] {
                class::SKY
            } else if v < treeline[x] {
                class::VEGETATION
            } else if noise.at(u + 3.1, v + 7.7, 3.0) > dirt_threshold {
                class::BACKGROUND
            } else {
                class::GRASS
            };
            mask.set(y, x, label);
        }
    }

    // Bushes of non-traversable vegetation, mostly towards the sides.
    let bushes = r.gen_range(1..=3);
    for _ in 0..bushes {
        let cx = if r.gen_bool(0.5) { uniform(&mut r, (0.0, 0.3)) } else { uniform(&mut r, (0.7, 1.0)) };
        let cy = uniform(&mut r, (h0 + band, 0.95));
        let rad = uniform(&mut r, (0.08, 0.17));
        for y in 0..s {
            for x in 0..s {
                let (u, v) = (px(x), px(y));
                let d = ((u - cx).powi(2) + ((v - cy) * 1.4).powi(2)).sqrt();
                if d < rad * (1.0 + 0.35 * noise.at(u + 11.0, v, 9.0)) && v >= treeline[x] - 0.02 {
                    mask.set(y, x, class::NON_TRAVERSABLE);
                }
            }
        }
    }

    // Trail from the bottom edge towards a vanishing point below the tree line.
    let rough = r.gen_bool(0.5);
    let (main, other) = if rough {
        (class::ROUGH_TRAIL, class::SMOOTH_TRAIL)
    } else {
        (class::SMOOTH_TRAIL, class::ROUGH_TRAIL)
    };
    let transition = r.gen_bool(0.3).then(|| uniform(&mut r, (0.65, 0.9)));
    let xb = uniform(&mut r, (0.3, 0.7));
    let xv = uniform(&mut r, (0.35, 0.65));
    let wb = uniform(&mut r, spec.trail_width_range);
    let top = h0 + band * 0.8;
    let mut trail_px = Vec::new();
    for y in 0..s {
        let v = px(y);
        if v < top {
            continue;
        }
        let t = (v - top) / (1.0 - top);
        let centre = xv + (xb - xv) * t + 0.04 * noise.at(0.3, v, 4.0);
        let half = 0.015 + (wb - 0.015) * t;
        for x in 0..s {
            let u = px(x);
            if (u - centre).abs() < half * (1.0 + 0.15 * noise.at(u, v + 5.0, 10.0)) {
                let label = match transition {
                    Some(tv) if v > tv => other,
                    _ => main,
                };
                mask.set(y, x, label);
                trail_px.push((u, v));
            }
        }
    }

    // Puddles, usually on the trail.
    if r.gen_bool(spec.puddle_probability) {
        for _ in 0..r.gen_range(1..=2) {
            let (cx, cy) = match trail_px.is_empty() {
                false if r.gen_bool(0.8) => trail_px[r.gen_range(0..trail_px.len())],
                _ => (uniform(&mut r, (0.2, 0.8)), uniform(&mut r, (0.6, 0.95))),
            };
            let cy = cy.max(top + 0.1);
            let rx = uniform(&mut r, (0.07, 0.15));
            let ry = rx * uniform(&mut r, (0.35, 0.55));
            for y in 0..s {
                for x in 0..s {
                    let (u, v) = (px(x), px(y));
                    if ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) < 1.0 {
                        mask.set(y, x, class::PUDDLE);
                    }
                }
            }
        }
    }

    // Rocks as irregular polygons.
    for _ in 0..count_in(&mut r, spec.obstacle_count_range) {
        let cx = uniform(&mut r, (0.1, 0.9));
        let cy = uniform(&mut r, (top + 0.1, 0.92));
        let rad = uniform(&mut r, (0.06, 0.13));
        let sides = r.gen_range(5..=7);
        let phase = uniform(&mut r, (0.0, std::f64::consts::TAU));
        let poly: Vec<(f64, f64)> = (0..sides)
            .map(|k| {
                let a = phase + std::f64::consts::TAU * k as f64 / sides as f64;
                let rr = rad * uniform(&mut r, (0.7, 1.15));
                (cx + rr * a.cos(), cy + 0.75 * rr * a.sin())
            })
            .collect();
        for y in 0..s {
            for x in 0..s {
                if point_in_polygon(px(x), px(y), &poly) {
                    mask.set(y, x, class::OBSTACLE);
                }
            }
        }
    }

    // Tree trunks in front of the tree line.
    for _ in 0..count_in(&mut r, spec.tree_count_range) {
        let cx = uniform(&mut r, (0.05, 0.95));
        let half = uniform(&mut r, (0.02, 0.035));
        let xi = ((cx * sf) as usize).min(s - 1);
        let y0 = (horizon[xi] - uniform(&mut r, (0.0, 0.05))).max(0.06);
        let y1 = (treeline[xi] + uniform(&mut r, (0.1, 0.3))).min(0.98);
        for y in 0..s {
            let v = px(y);
            if v < y0 || v > y1 {
                continue;
            }
            for x in 0..s {
                if (px(x) - cx).abs() < half {
                    mask.set(y, x, class::TREE);
                }
            }
        }
    }

    // Shading: per-image illumination, colour cast and per-class jitter.
    let gain = uniform(&mut r, (0.78, 1.18));
    let cast: [f64; 3] = [uniform(&mut r, (0.93, 1.07)), uniform(&mut r, (0.93, 1.07)), uniform(&mut r, (0.93, 1.07))];
    let jitter: Vec<[f64; 3]> = (0..NUM_CLASSES)
        .map(|_| [uniform(&mut r, (-0.05, 0.05)), uniform(&mut r, (-0.05, 0.05)), uniform(&mut r, (-0.05, 0.05))])
        .collect();
    let light_dir = uniform(&mut r, (-1.0, 1.0));
    let mut img = vec![0.0; 3 * s * s];
    for y in 0..s {
        let v = px(y);
        for x in 0..s {
            let u = px(x);
            let label = mask.get(y, x);
            let m = material(label);
            let mut lum = m.coarse.1 * noise.at(u + label as f64 * 13.0, v, m.coarse.0)
                + m.fine.1 * noise.at(u * 1.7 + label as f64 * 5.0, v * 1.3, m.fine.0);
            match label {
                class::SKY => lum += 0.12 * (v / horizon[x].max(0.01)) - 0.06,
                class::TREE => lum += 0.06 * noise.at(u, 0.0, 90.0),
                class::OBSTACLE => lum += 0.08 * (light_dir * (u - 0.5) - (v - 0.5)),
                class::PUDDLE => lum += 0.05 * noise.at(u * 4.0, v, 3.0),
                _ => {}
            }
            for c in 0..3 {
                let base = (m.rgb[c] + jitter[label as usize][c]) * cast[c];
                img[c * s * s + y * s + x] = (base + lum) * gain;
            }
        }
    }
    // Dark outlines on rocks make them separable from dirt by shape.
    for y in 1..s - 1 {
        for x in 1..s - 1 {
            if mask.get(y, x) == class::OBSTACLE
                && [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                    .iter()
                    .any(|&(yy, xx)| mask.get(yy, xx) != class::OBSTACLE)
            {
                for c in 0..3 {
                    img[c * s * s + y * s + x] *= 0.6;
                }
            }
        }
    }
    let normal = rand_distr_normal(&mut r, img.len());
    for (v, n) in img.iter_mut().zip(normal) {
        *v = (*v + spec.texture_noise_scale * n).clamp(0.0, 1.0);
    }
    Ok((Tensor::new(vec![3, s, s], img)?, mask))
}

/// Standard normal samples via Box-Muller.
fn rand_distr_normal(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = r.gen::<f64>().max(1e-300);
        let u2: f64 = r.gen();
        let rad = (-2.0 * u1.ln()).sqrt();
        out.push(rad * (std::f64::consts::TAU * u2).cos());
        out.push(rad * (std::f64::consts::TAU * u2).sin());
    }
    out.truncate(n);
    out
}

/// Generates `count` scenes (indices `0..count`), all tagged as training data.
pub fn generate_dataset(spec: &SceneSpec, count: usize, exec: Execution) -> Result<LabeledDataset> {
    spec.validate()?;
    let pairs = exec.map(count, |i| generate_scene(spec, i as u64))?;
    let (images, masks) = pairs.into_iter().unzip();
    LabeledDataset::new(images, masks, vec![Split::Train; count])
}

/// Concatenates `a` then `b`, keeping their split tags.
pub fn merge_datasets(a: &LabeledDataset, b: &LabeledDataset) -> Result<LabeledDataset> {
    if a.class_names != b.class_names {
        return Err(Error::invalid("cannot merge datasets with different class taxonomies"));
    }
    let mut out = a.clone();
    out.images.extend(b.images.iter().cloned());
    out.masks.extend(b.masks.iter().cloned());
    out.splits.extend(b.splits.iter().copied());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Counts { train: usize, val: usize, test: usize },
    Ratios { train: f64, val: f64, test: f64 },
}

impl SplitSpec {
    fn counts(self, n: usize) -> Result<(usize, usize, usize)> {
        match self {
            SplitSpec::Counts { train, val, test } => {
                if train + val + test != n {
                    return Err(Error::invalid(format!(
                        "split counts {train}+{val}+{test} do not sum to {n}"
                    )));
                }
                Ok((train, val, test))
            }
            SplitSpec::Ratios { train, val, test } => {
                if [train, val, test].iter().any(|r| *r < 0.0) || (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("split ratios {train}/{val}/{test} do not sum to 1")));
                }
                let v = (val * n as f64).round() as usize;
                let t = (test * n as f64).round() as usize;
                let tr = n.checked_sub(v + t).ok_or_else(|| Error::invalid("split ratios overflow"))?;
                Ok((tr, v, t))
            }
        }
    }
}

/// Seeded shuffle, then partition into train/val/test. Item order is kept;
/// only the tags change.
pub fn split_dataset(d: &LabeledDataset, spec: SplitSpec, seed: u64) -> Result<LabeledDataset> {
    let (train, val, _) = spec.counts(d.len())?;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut rng::stream(seed, 0));
    let mut out = d.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

pub fn hflip_image(img: &Tensor) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = src[row * w + w - 1 - x];
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

pub fn hflip_mask(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = mask.labels[y * w + w - 1 - x];
        }
    }
    Mask { height: h, width: w, labels }
}

pub fn adjust_brightness(img: &Tensor, delta: f64) -> Tensor {
    img.map(|v| (v + delta).clamp(0.0, 1.0))
}

/// Scales each channel's deviation from its mean by `factor`.
pub fn adjust_contrast(img: &Tensor, factor: f64) -> Tensor {
    let plane = img.shape()[1] * img.shape()[2];
    let mut out = img.clone();
    for chan in out.data_mut().chunks_mut(plane) {
        let mean = chan.iter().sum::<f64>() / plane as f64;
        chan.iter_mut().for_each(|v| *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0));
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Rotates hue by `delta` turns.
pub fn adjust_hue(img: &Tensor, delta: f64) -> Tensor {
    let plane = img.shape()[1] * img.shape()[2];
    let src = img.data();
    let mut out = img.clone();
    let dst = out.data_mut();
    for p in 0..plane {
        let (h, s, v) = rgb_to_hsv(src[p], src[plane + p], src[2 * plane + p]);
        let (r, g, b) = hsv_to_rgb(h + delta, s, v);
        dst[p] = r.clamp(0.0, 1.0);
        dst[plane + p] = g.clamp(0.0, 1.0);
        dst[2 * plane + p] = b.clamp(0.0, 1.0);
    }
    out
}

/// Jitter ranges of [`augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub flip_probability: f64,
    pub hue: f64,
    pub contrast: (f64, f64),
    pub brightness: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            hue: 0.05,
            contrast: (0.8, 1.2),
            brightness: 0.1,
        }
    }
}

/// Random flip (image and mask together), then hue, contrast and brightness
/// jitter on the image only. Pure in `seed`.
pub fn augment(image: &Tensor, mask: &Mask, seed: u64) -> (Tensor, Mask) {
    augment_with(image, mask, seed, &AugmentSpec::default())
}

pub fn augment_with(image: &Tensor, mask: &Mask, seed: u64, spec: &AugmentSpec) -> (Tensor, Mask) {
    let mut r = rng::stream(seed, 0);
    let flip = r.gen_bool(spec.flip_probability.clamp(0.0, 1.0));
    let hue = uniform(&mut r, (-spec.hue, spec.hue));
    let contrast = uniform(&mut r, spec.contrast);
    let brightness = uniform(&mut r, (-spec.brightness, spec.brightness));
    let (mut img, mask) = if flip {
        (hflip_image(image), hflip_mask(mask))
    } else {
        (image.clone(), mask.clone())
    };
    if hue != 0.0 {
        img = adjust_hue(&img, hue);
    }
    img = adjust_contrast(&img, contrast);
    img = adjust_brightness(&img, brightness);
    (img, mask)
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn image_to_rgb8(img: &Tensor) -> RgbImage {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = img.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(d[p]), q(d[plane + p]), q(d[2 * plane + p])])
    })
}

pub fn rgb8_to_image(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image shape")
}

/// Colourised label map for display.
pub fn mask_to_rgb8(mask: &Mask) -> RgbImage {
    RgbImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        let l = mask.get(y as usize, x as usize) as usize;
        image::Rgb(PALETTE.get(l).copied().unwrap_or([255, 255, 255]))
    })
}

pub(crate) fn png_bytes_rgb(img: &RgbImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

pub(crate) fn png_bytes_gray(img: &GrayImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `images/NNNNN.png`, `masks/NNNNN.png` and `manifest.txt` under `dir`.
pub fn save_dataset(d: &LabeledDataset, dir: &Path) -> Result<()> {
    d.validate()?;
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    for sub in [&images_dir, &masks_dir] {
        fs::create_dir_all(sub).map_err(|e| Error::io(sub, e))?;
    }
    for (i, (img, mask)) in d.images.iter().zip(&d.masks).enumerate() {
        let ip = images_dir.join(format!("{i:05}.png"));
        fsutil::atomic_write(&ip, &png_bytes_rgb(&image_to_rgb8(img), &ip)?)?;
        let mp = masks_dir.join(format!("{i:05}.png"));
        let gray = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.labels.clone()).expect("mask size");
        fsutil::atomic_write(&mp, &png_bytes_gray(&gray, &mp)?)?;
    }
    let (h, w) = d.masks.first().map_or((0, 0), |m| (m.height, m.width));
    let manifest = format!(
        "format_version={DATASET_FORMAT_VERSION}\ncount={}\nheight={h}\nwidth={w}\nclasses={}\nsplits={}\n",
        d.len(),
        d.class_names.join(","),
        d.splits.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
    );
    fsutil::atomic_write(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Reads a dataset written by [`save_dataset`], checking the manifest.
pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let kv = fsutil::parse_key_values(&text, &mpath)?;
    let get = |key: &str| {
        kv.get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(&mpath, format!("missing `{key}`")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(&mpath, format!("`{key}` is not an integer")))
    };
    let version = num("format_version")? as u32;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let count = num("count")?;
    let class_names: Vec<String> = get("classes")?.split(',').map(str::to_string).collect();
    let splits: Vec<Split> = match get("splits")? {
        "" => Vec::new(),
        s => s.split(',').map(str::parse).collect::<Result<_>>()?,
    };
    if splits.len() != count {
        return Err(Error::format(&mpath, format!("count={count} but {} split tags", splits.len())));
    }
    let on_disk = fs::read_dir(dir.join("images"))
        .map_err(|e| Error::io(dir.join("images"), e))?
        .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == "png")))
        .count();
    if on_disk != count {
        return Err(Error::format(&mpath, format!("count={count} but {on_disk} image files")));
    }
    let mut images = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        images.push(rgb8_to_image(&read_png(&dir.join("images").join(format!("{i:05}.png")))?.to_rgb8()));
        let g = read_png(&dir.join("masks").join(format!("{i:05}.png")))?.to_luma8();
        masks.push(Mask::new(g.height() as usize, g.width() as usize, g.into_raw())?);
    }
    let d = LabeledDataset {
        images,
        masks,
        splits,
        class_names,
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec::default().with_size(32)
    }

    #[test]
    fn scene_is_deterministic() {
        let a = generate_scene(&small(), 5).unwrap();
        let b = generate_scene(&small(), 5).unwrap();
        assert_eq!(a.0.to_le_bytes(), b.0.to_le_bytes());
        assert_eq!(a.1, b.1);
        let c = generate_scene(&small(), 6).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn scene_ranges() {
        for i in 0..20 {
            let (img, mask) = generate_scene(&small(), i).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(mask.labels().iter().all(|&l| (l as usize) < NUM_CLASSES));
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = small();
        s.horizon_band = (0.3, 0.3);
        assert!(s.validate().is_err());
        let mut s = small();
        s.image_size = 20;
        assert!(s.validate().is_err());
        let mut s = small();
        s.obstacle_count_range = (3, 1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn brightness_on_mid_gray() {
        let img = Tensor::full(&[3, 2, 2], 0.5);
        let out = adjust_brightness(&img, 0.1);
        assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn double_flip_is_identity() {
        let (img, mask) = generate_scene(&small(), 1).unwrap();
        assert_eq!(hflip_image(&hflip_image(&img)), img);
        assert_eq!(hflip_mask(&hflip_mask(&mask)), mask);
        let always = AugmentSpec {
            flip_probability: 1.0,
            hue: 0.0,
            contrast: (1.0, 1.0 + 1e-12),
            brightness: 0.0,
        };
        let (i1, m1) = augment_with(&img, &mask, 3, &always);
        let (i2, m2) = augment_with(&i1, &m1, 3, &always);
        assert_eq!(m2, mask);
        let err = i2.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn photometric_jitter_keeps_mask() {
        let (img, mask) = generate_scene(&small(), 2).unwrap();
        let no_flip = AugmentSpec {
            flip_probability: 0.0,
            ..AugmentSpec::default()
        };
        for seed in 0..10 {
            let (out, m) = augment_with(&img, &mask, seed, &no_flip);
            assert_eq!(m, mask);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let (a, _) = augment(&img, &mask, 4);
        let (b, _) = augment(&img, &mask, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn hue_round_trip() {
        let img = Tensor::from_slice(&[3, 1, 3], &[0.9, 0.2, 0.4, 0.1, 0.7, 0.4, 0.3, 0.3, 0.4]).unwrap();
        let back = adjust_hue(&adjust_hue(&img, 0.05), -0.05);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_and_split() {
        let a = generate_dataset(&small(), 7, Execution::default()).unwrap();
        let b = generate_dataset(&SceneSpec::trail(1).with_size(32), 3, Execution::default()).unwrap();
        let m = merge_datasets(&a, &b).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.images[7], b.images[0]);
        assert_eq!(merge_datasets(&a, &LabeledDataset::empty()).unwrap(), a);

        let s1 = split_dataset(&m, SplitSpec::Counts { train: 5, val: 3, test: 2 }, 9).unwrap();
        let s2 = split_dataset(&m, SplitSpec::Counts { train: 5, val: 3, test: 2 }, 9).unwrap();
        assert_eq!(s1.splits, s2.splits);
        assert_eq!(s1.indices(Split::Train).len(), 5);
        assert_eq!(s1.indices(Split::Val).len(), 3);
        assert_eq!(s1.indices(Split::Test).len(), 2);
        assert!(split_dataset(&m, SplitSpec::Counts { train: 5, val: 3, test: 3 }, 9).is_err());
        let r = split_dataset(&m, SplitSpec::Ratios { train: 0.6, val: 0.2, test: 0.2 }, 1).unwrap();
        assert_eq!(r.indices(Split::Test).len(), 2);
    }

    #[test]
    fn merge_rejects_taxonomy_mismatch() {
        let a = generate_dataset(&small(), 1, Execution::default()).unwrap();
        let mut b = a.clone();
        b.class_names.pop();
        assert!(merge_datasets(&a, &b).is_err());
    }
}
