//! Standard and adversarial training with Adam, plus (attacked) evaluation.
//!
//! Each batch is processed image by image: augment, optionally replace the
//! image by a PGD example against the current weights, then forward and
//! backward. Per-image gradients are summed in batch order before the Adam
//! step, so results do not depend on the execution strategy.

use rand::seq::SliceRandom;

use crate::attacks::{self, AttackSpec};
use crate::autodiff::Tape;
use crate::data::{self, AugmentSpec, LabeledDataset, Mask, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{Confusion, MetricReport};
use crate::nn::{argmax_mask, SegModel};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng;
use crate::tensor::Tensor;

pub const CLEAN_TAG: &str = "clean";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// `None` means standard training.
    pub attack: Option<AttackSpec>,
    pub augment: Option<AugmentSpec>,
    /// Train on clean and perturbed copies of each image.
    pub mix_clean: bool,
    /// Also score the validation split under the training attack each epoch.
    pub attacked_validation: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            batch_size: 8,
            attack: None,
            augment: Some(AugmentSpec::default()),
            mix_clean: false,
            attacked_validation: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }

    pub fn attack_tag(&self) -> String {
        self.attack.as_ref().map_or_else(|| CLEAN_TAG.to_string(), AttackSpec::tag)
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub miou: f64,
    pub pixel_acc: f64,
    pub attack_tag: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,split,loss,miou,pixel_acc,attack_tag";

impl ExperimentRecord {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_CSV_HEADER}\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{}\n",
                r.epoch, r.split, r.loss, r.miou, r.pixel_acc, r.attack_tag
            ));
        }
        out
    }

    pub fn rows(&self, split: Split, attack_tag: &str) -> Vec<&EpochRecord> {
        self.epochs.iter().filter(|r| r.split == split && r.attack_tag == attack_tag).collect()
    }

    pub fn last(&self, split: Split, attack_tag: &str) -> Option<&EpochRecord> {
        self.rows(split, attack_tag).into_iter().last()
    }

    pub fn at_best(&self, split: Split, attack_tag: &str) -> Option<&EpochRecord> {
        self.rows(split, attack_tag).into_iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Mean pixel cross-entropy of `[1, K, H, W]` logits against `mask`.
pub fn cross_entropy(logits: &Tensor, mask: &Mask) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone())?;
    let loss = tape.softmax_cross_entropy(l, &mask.labels_usize())?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and confusion counts of one scored image.
#[derive(Debug, Clone)]
pub struct ImageScore {
    pub loss: f64,
    pub confusion: Confusion,
}

/// Scores every image of `d`, perturbing it first when `attack` is given.
pub fn score_images(model: &SegModel, d: &LabeledDataset, attack: Option<&AttackSpec>, exec: Execution) -> Result<Vec<ImageScore>> {
    if let Some(a) = attack {
        a.validate()?;
    }
    let k = model.config().num_classes;
    exec.map(d.len(), |i| {
        let image = match attack {
            Some(a) => attacks::pgd_single(model, &d.images[i], &d.masks[i], a, i as u64)?,
            None => d.images[i].clone(),
        };
        let logits = model.logits(&image)?;
        let loss = cross_entropy(&logits, &d.masks[i])?;
        let mut confusion = Confusion::new(k);
        confusion.add(&argmax_mask(&logits), &d.masks[i])?;
        Ok(ImageScore { loss, confusion })
    })
}

/// Loss, mIoU and pixel accuracy over all of `d`. Confusion counts are
/// pooled over the split before IoU is taken.
pub fn evaluate(model: &SegModel, d: &LabeledDataset, attack: Option<&AttackSpec>, exec: Execution) -> Result<MetricReport> {
    if d.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let scores = score_images(model, d, attack, exec)?;
    Ok(aggregate(&scores, model.config().num_classes, attack.map_or_else(|| CLEAN_TAG.to_string(), AttackSpec::tag)))
}

fn aggregate(scores: &[ImageScore], k: usize, tag: String) -> MetricReport {
    let mut cm = Confusion::new(k);
    let mut loss = 0.0;
    for s in scores {
        cm.merge(&s.confusion);
        loss += s.loss;
    }
    MetricReport::from_confusion(&cm, loss / scores.len() as f64, tag)
}

struct ItemResult {
    losses: Vec<f64>,
    grads: Vec<Vec<Tensor>>,
    confusion: Confusion,
}

/// Trains a copy of `model` on the train split of `dataset`, scoring the
/// val split after every epoch. Returns the weights from the epoch with the
/// best validation mIoU (under the training attack when that is scored).
pub fn train(model: &SegModel, dataset: &LabeledDataset, config: &TrainConfig, exec: Execution) -> Result<(SegModel, ExperimentRecord)> {
    train_with_progress(model, dataset, config, exec, &mut |_| {})
}

pub fn train_with_progress(
    model: &SegModel,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    exec: Execution,
    progress: &mut dyn FnMut(&[EpochRecord]),
) -> Result<(SegModel, ExperimentRecord)> {
    config.validate()?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let val = dataset.subset(Split::Val);
    let k = model.config().num_classes;
    let adam = AdamConfig::with_lr(config.lr);
    let mut state = AdamState::new(model.params());
    let mut current = model.clone();
    let mut best: Option<(f64, SegModel, usize)> = None;
    let mut record = ExperimentRecord::default();
    let tag = config.attack_tag();
    let n = train_idx.len();

    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(rng::derive(config.seed, "shuffle", epoch as u64), 0));
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        let mut epoch_cm = Confusion::new(k);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let snapshot = &current;
            let results = exec.map(batch.len(), |j| {
                let item = batch[j];
                let position = (epoch * n + b * config.batch_size + j) as u64;
                let (image, mask) = match &config.augment {
                    Some(spec) => data::augment_with(
                        &dataset.images[item],
                        &dataset.masks[item],
                        rng::derive(config.seed, "augment", position),
                        spec,
                    ),
                    None => (dataset.images[item].clone(), dataset.masks[item].clone()),
                };
                let mut inputs = Vec::with_capacity(2);
                if let Some(spec) = &config.attack {
                    if config.mix_clean {
                        inputs.push(image.clone());
                    }
                    let spec = AttackSpec {
                        seed: rng::derive(config.seed, "train-attack", 0),
                        ..*spec
                    };
                    inputs.push(attacks::pgd_single(snapshot, &image, &mask, &spec, position)?);
                } else {
                    inputs.push(image);
                }
                let mut res = ItemResult {
                    losses: Vec::new(),
                    grads: Vec::new(),
                    confusion: Confusion::new(k),
                };
                for x in &inputs {
                    let (loss, grads, logits) = snapshot.loss_and_param_grads(x, &mask)?;
                    res.confusion.add(&argmax_mask(&logits), &mask)?;
                    res.losses.push(loss);
                    res.grads.push(grads);
                }
                Ok(res)
            })?;
            let mut sum: Vec<Tensor> = current.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut count = 0usize;
            for r in &results {
                for (loss, grads) in r.losses.iter().zip(&r.grads) {
                    for (s, g) in sum.iter_mut().zip(grads) {
                        s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    }
                    epoch_loss += loss;
                    count += 1;
                }
                epoch_cm.merge(&r.confusion);
            }
            epoch_count += count;
            let inv = 1.0 / count as f64;
            sum.iter_mut().for_each(|s| s.data_mut().iter_mut().for_each(|v| *v *= inv));
            adam_step(current.params_mut(), &sum, &mut state, &adam)?;
            for p in current.params() {
                p.ensure_finite("adam update")?;
            }
        }
        let train_report = MetricReport::from_confusion(&epoch_cm, epoch_loss / epoch_count as f64, tag.clone());
        record.epochs.push(EpochRecord::from_report(epoch, Split::Train, &train_report));

        let mut score = train_report.mean_iou;
        if !val.is_empty() {
            let clean = evaluate(&current, &val, None, exec)?;
            record.epochs.push(EpochRecord::from_report(epoch, Split::Val, &clean));
            score = clean.mean_iou;
            if let (Some(spec), true) = (&config.attack, config.attacked_validation) {
                let attacked = evaluate(&current, &val, Some(spec), exec)?;
                record.epochs.push(EpochRecord::from_report(epoch, Split::Val, &attacked));
                score = attacked.mean_iou;
            }
        }
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, current.clone(), epoch));
        }
        progress(&record.epochs);
    }
    let (_, best_model, best_epoch) = best.expect("at least one epoch");
    record.best_epoch = best_epoch;
    Ok((best_model, record))
}

impl EpochRecord {
    fn from_report(epoch: usize, split: Split, r: &MetricReport) -> Self {
        Self {
            epoch,
            split,
            loss: r.mean_loss,
            miou: r.mean_iou,
            pixel_acc: r.pixel_accuracy,
            attack_tag: r.attack_tag.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, ModelConfig};

    /// Two classes split by a vertical colour edge.
    fn separable(n: usize) -> LabeledDataset {
        let (h, w) = (8, 8);
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for i in 0..n {
            let edge = 2 + i % 5;
            let mut img = vec![0.0; 3 * h * w];
            let mut labels = vec![0u8; h * w];
            for y in 0..h {
                for x in 0..w {
                    let right = x >= edge;
                    labels[y * w + x] = right as u8;
                    img[y * w + x] = if right { 0.9 } else { 0.1 };
                    img[h * w + y * w + x] = 0.5;
                    img[2 * h * w + y * w + x] = if right { 0.2 } else { 0.8 };
                }
            }
            images.push(Tensor::new(vec![3, h, w], img).unwrap());
            masks.push(Mask::new(h, w, labels).unwrap());
        }
        let mut d = LabeledDataset::new(images, masks, vec![Split::Train; n]).unwrap();
        d.splits[n - 1] = Split::Val;
        d
    }

    fn tiny_model() -> SegModel {
        SegModel::new(&ModelConfig {
            num_classes: 2,
            base_channels: 4,
            stages: 1,
            seed: 1,
            ..ModelConfig::new(Architecture::LinkNet)
        })
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 1e-2,
            batch_size: 4,
            augment: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_zero_epochs() {
        let err = train(&tiny_model(), &separable(4), &quick(0), Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn learns_separable_task() {
        let (m, rec) = train(&tiny_model(), &separable(9), &quick(20), Execution::default()).unwrap();
        let report = evaluate(&m, &separable(9).subset(Split::Train), None, Execution::default()).unwrap();
        assert!(report.mean_iou >= 0.9, "train mIoU {}", report.mean_iou);
        assert_eq!(rec.rows(Split::Train, CLEAN_TAG).len(), 20);
    }

    #[test]
    fn training_is_deterministic_across_execution_modes() {
        let d = separable(6);
        let cfg = TrainConfig {
            attack: Some(AttackSpec::new(crate::attacks::Norm::Linf, 0.03, 0.01, 2)),
            augment: Some(AugmentSpec::default()),
            ..quick(2)
        };
        let (a, ra) = train(&tiny_model(), &d, &cfg, Execution::Sequential).unwrap();
        let (b, rb) = train(&tiny_model(), &d, &cfg, Execution::default()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ra.to_csv(), rb.to_csv());
    }

    #[test]
    fn evaluate_is_read_only() {
        let m = tiny_model();
        let before = m.fingerprint();
        let d = separable(3);
        evaluate(&m, &d, Some(&AttackSpec::pgd_linf()), Execution::default()).unwrap();
        assert_eq!(m.fingerprint(), before);
        assert!(matches!(
            evaluate(&m, &LabeledDataset::empty(), None, Execution::default()),
            Err(Error::Empty(_))
        ));
    }
}
