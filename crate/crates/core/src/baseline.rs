//! Per-pixel multinomial logistic regression on raw RGB values.
//!
//! A reference point for how much of a segmentation task is solvable from
//! colour alone, with no spatial context.

use crate::data::{LabeledDataset, Mask};
use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelLogistic {
    /// `[K, 3]`
    pub weights: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { iterations: 300, lr: 0.05 }
    }
}

fn pixels(d: &LabeledDataset) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (img, mask) in d.images.iter().zip(&d.masks) {
        let plane = mask.height() * mask.width();
        let v = img.data();
        for p in 0..plane {
            xs.push([v[p], v[plane + p], v[2 * plane + p]]);
            ys.push(mask.labels()[p] as usize);
        }
    }
    (xs, ys)
}

impl PixelLogistic {
    /// Full-batch Adam on the mean cross-entropy over every pixel of `d`.
    pub fn fit(d: &LabeledDataset, num_classes: usize, config: &LogisticConfig) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Empty("baseline training set"));
        }
        let (xs, ys) = pixels(d);
        let k = num_classes;
        let mut params = vec![Tensor::zeros(&[k, 3]), Tensor::zeros(&[k])];
        let mut state = AdamState::new(&params);
        let adam = AdamConfig::with_lr(config.lr);
        let inv = 1.0 / xs.len() as f64;
        let mut probs = vec![0.0; k];
        for _ in 0..config.iterations {
            let mut gw = vec![0.0; k * 3];
            let mut gb = vec![0.0; k];
            let (w, b) = (params[0].data(), params[1].data());
            for (x, &y) in xs.iter().zip(&ys) {
                let mut max = f64::NEG_INFINITY;
                for c in 0..k {
                    probs[c] = b[c] + w[c * 3] * x[0] + w[c * 3 + 1] * x[1] + w[c * 3 + 2] * x[2];
                    max = max.max(probs[c]);
                }
                let mut z = 0.0;
                for p in probs.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for c in 0..k {
                    let g = (probs[c] / z - (c == y) as u8 as f64) * inv;
                    gb[c] += g;
                    for j in 0..3 {
                        gw[c * 3 + j] += g * x[j];
                    }
                }
            }
            let grads = [Tensor::new(vec![k, 3], gw)?, Tensor::new(vec![k], gb)?];
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        let bias = params.pop().expect("bias");
        let weights = params.pop().expect("weights");
        Ok(Self { weights, bias })
    }

    pub fn predict(&self, image: &Tensor) -> Result<Mask> {
        if image.ndim() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape("baseline", format!("{:?}", image.shape())));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let plane = h * w;
        let k = self.bias.len();
        let (wt, b, v) = (self.weights.data(), self.bias.data(), image.data());
        let labels = (0..plane)
            .map(|p| {
                let mut best = (f64::NEG_INFINITY, 0);
                for c in 0..k {
                    let s = b[c] + wt[c * 3] * v[p] + wt[c * 3 + 1] * v[plane + p] + wt[c * 3 + 2] * v[2 * plane + p];
                    if s > best.0 {
                        best = (s, c);
                    }
                }
                best.1 as u8
            })
            .collect();
        Mask::new(h, w, labels)
    }

    pub fn confusion(&self, d: &LabeledDataset) -> Result<Confusion> {
        let mut cm = Confusion::new(self.bias.len());
        for (img, mask) in d.images.iter().zip(&d.masks) {
            cm.add(&self.predict(img)?, mask)?;
        }
        Ok(cm)
    }
}
