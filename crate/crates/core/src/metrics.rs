//! Segmentation metrics and result tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::data::Mask;
use crate::error::{Error, Result};

/// How classes absent from both prediction and ground truth enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroUnion {
    #[default]
    Exclude,
    CountAsZero,
}

/// Pixel confusion counts, `counts[truth * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, pred: &Mask, truth: &Mask) -> Result<()> {
        check_same_shape(pred, truth)?;
        let k = self.num_classes;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::LabelOutOfRange {
                    label: p.max(t),
                    num_classes: k,
                });
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.num_classes, other.num_classes, "confusion class count");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `None` for classes with an empty union.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let inter = self.counts[c * k + c];
                let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
                let union = truth + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self, zero_union: ZeroUnion) -> f64 {
        let per_class = self.per_class_iou();
        let values: Vec<f64> = match zero_union {
            ZeroUnion::Exclude => per_class.iter().flatten().copied().collect(),
            ZeroUnion::CountAsZero => per_class.iter().map(|v| v.unwrap_or(0.0)).collect(),
        };
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let k = self.num_classes;
        let correct: u64 = (0..k).map(|c| self.counts[c * k + c]).sum();
        match self.total() {
            0 => 0.0,
            total => correct as f64 / total as f64,
        }
    }
}

fn check_same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(
            "metrics",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// Class-mean IoU over classes with a non-empty union, plus per-class values.
pub fn mean_iou(pred: &Mask, truth: &Mask, num_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut cm = Confusion::new(num_classes);
    cm.add(pred, truth)?;
    Ok((cm.mean_iou(ZeroUnion::Exclude), cm.per_class_iou()))
}

pub fn pixel_accuracy(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_same_shape(pred, truth)?;
    if pred.labels().is_empty() {
        return Err(Error::Empty("mask"));
    }
    let equal = pred.labels().iter().zip(truth.labels()).filter(|(a, b)| a == b).count();
    Ok(equal as f64 / pred.labels().len() as f64)
}

/// Aggregate quality of a model on one split, optionally under attack.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mean_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    pub mean_loss: f64,
    pub attack_tag: String,
}

impl MetricReport {
    pub fn from_confusion(cm: &Confusion, mean_loss: f64, attack_tag: impl Into<String>) -> Self {
        Self {
            mean_iou: cm.mean_iou(ZeroUnion::Exclude),
            per_class_iou: cm.per_class_iou(),
            pixel_accuracy: cm.pixel_accuracy(),
            mean_loss,
            attack_tag: attack_tag.into(),
        }
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub stage: String,
    pub model: String,
    pub attack: String,
    pub split: String,
    pub miou: f64,
    pub pixel_acc: f64,
    pub loss: f64,
}

impl MetricRecord {
    pub fn new(stage: &str, model: &str, split: &str, report: &MetricReport) -> Self {
        Self {
            stage: stage.to_string(),
            model: model.to_string(),
            attack: report.attack_tag.clone(),
            split: split.to_string(),
            miou: report.mean_iou,
            pixel_acc: report.pixel_accuracy,
            loss: report.mean_loss,
        }
    }
}

pub const CSV_HEADER: &str = "stage,model,attack,split,miou,pixel_acc,loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableLayout {
    /// Flat CSV with [`CSV_HEADER`] columns.
    Csv,
    /// Metric rows by model columns: standard-training results.
    Standard,
    /// Same grid as `Standard`, used for adversarially trained models.
    Adversarial,
    /// One row per model with IoU/loss columns: training on robustified data.
    Robust,
}

impl std::str::FromStr for TableLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "standard" => Ok(Self::Standard),
            "adversarial" => Ok(Self::Adversarial),
            "robust" => Ok(Self::Robust),
            other => Err(Error::invalid(format!("unknown table layout `{other}`"))),
        }
    }
}

fn split_rank(split: &str) -> usize {
    match split {
        "train" => 0,
        "val" => 1,
        "test" => 2,
        _ => 3,
    }
}

fn attack_rank(attack: &str) -> usize {
    match attack {
        "clean" => 0,
        "pgd_l2" => 1,
        "pgd_linf" => 2,
        _ => 3,
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn attack_suffix(attack: &str) -> String {
    match attack {
        "clean" | "" => String::new(),
        other => {
            let name = match other.strip_prefix("pgd_") {
                Some("linf") => "PGD L∞".to_string(),
                Some(norm) => format!("PGD {}", norm.to_uppercase()),
                None => other.to_uppercase(),
            };
            format!(" ({name})")
        }
    }
}

/// Distinct (split, attack) keys in canonical table order.
fn row_keys(records: &[MetricRecord]) -> Vec<(String, String)> {
    let keys: BTreeSet<(usize, String, usize, String)> = records
        .iter()
        .map(|r| (split_rank(&r.split), r.split.clone(), attack_rank(&r.attack), r.attack.clone()))
        .collect();
    keys.into_iter().map(|(_, s, _, a)| (s, a)).collect()
}

fn models_in_order(records: &[MetricRecord]) -> Vec<String> {
    let mut models: Vec<String> = Vec::new();
    for r in records {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    models
}

fn lookup<'a>(records: &'a [MetricRecord], model: &str, split: &str, attack: &str) -> Option<&'a MetricRecord> {
    records
        .iter()
        .find(|r| r.model == model && r.split == split && r.attack == attack)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Renders records as CSV or as a Markdown table. Floats use two decimals.
pub fn emit_table(records: &[MetricRecord], layout: TableLayout) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    let mut out = String::new();
    match layout {
        TableLayout::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in records {
                writeln!(
                    out,
                    "{},{},{},{},{:.2},{:.2},{:.2}",
                    r.stage, r.model, r.attack, r.split, r.miou, r.pixel_acc, r.loss
                )
                .unwrap();
            }
        }
        TableLayout::Standard | TableLayout::Adversarial => {
            let models = models_in_order(records);
            let keys = row_keys(records);
            writeln!(out, "| | {} |", models.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---|".repeat(models.len())).unwrap();
            let splits: Vec<String> = keys.iter().fold(Vec::new(), |mut acc, (s, _)| {
                if !acc.contains(s) {
                    acc.push(s.clone());
                }
                acc
            });
            for split in &splits {
                for metric in ["IoU", "Loss"] {
                    for (_, attack) in keys.iter().filter(|(s, _)| s == split) {
                        let label = format!("{} {metric}{}", capitalize(split), attack_suffix(attack));
                        let cells: Vec<String> = models
                            .iter()
                            .map(|m| {
                                cell(lookup(records, m, split, attack).map(|r| if metric == "IoU" { r.miou } else { r.loss }))
                            })
                            .collect();
                        writeln!(out, "| {label} | {} |", cells.join(" | ")).unwrap();
                    }
                }
            }
        }
        TableLayout::Robust => {
            let models = models_in_order(records);
            let keys = row_keys(records);
            let mut header = Vec::new();
            for metric in ["IoU", "Loss"] {
                for (split, attack) in &keys {
                    header.push(format!("{} {metric}{}", capitalize(split), attack_suffix(attack)));
                }
            }
            writeln!(out, "| | {} |", header.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---|".repeat(header.len())).unwrap();
            for m in &models {
                let mut cells = Vec::new();
                for metric in ["IoU", "Loss"] {
                    for (split, attack) in &keys {
                        cells.push(cell(
                            lookup(records, m, split, attack).map(|r| if metric == "IoU" { r.miou } else { r.loss }),
                        ));
                    }
                }
                writeln!(out, "| {m} | {} |", cells.join(" | ")).unwrap();
            }
        }
    }
    Ok(out)
}

/// Parses CSV produced by [`emit_table`] with [`TableLayout::Csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(Error::Empty("csv"))?;
    if header.trim() != CSV_HEADER {
        return Err(Error::invalid(format!("unexpected CSV header `{header}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::invalid(format!("CSV row {} has {} fields", i + 1, f.len())));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("CSV row {}: `{s}`: {e}", i + 1)))
            };
            Ok(MetricRecord {
                stage: f[0].to_string(),
                model: f[1].to_string(),
                attack: f[2].to_string(),
                split: f[3].to_string(),
                miou: num(f[4])?,
                pixel_acc: num(f[5])?,
                loss: num(f[6])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> Mask {
        Mask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_overlap() {
        let m = mask(2, 2, &[0, 3, 3, 9]);
        let (miou, per_class) = mean_iou(&m, &m, 10).unwrap();
        assert_eq!(miou, 1.0);
        assert_eq!(per_class.iter().flatten().count(), 3);
        assert_eq!(pixel_accuracy(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn worked_two_by_two_example() {
        // Brute-force set counting: class 0 -> |{0}| / |{0,1}| = 1/2,
        // class 1 -> |{2,3}| / |{1,2,3}| = 2/3, mean 7/12.
        let pred = mask(2, 2, &[0, 0, 1, 1]);
        let truth = mask(2, 2, &[0, 1, 1, 1]);
        let (miou, per_class) = mean_iou(&pred, &truth, 2).unwrap();
        assert!((per_class[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(pixel_accuracy(&pred, &truth).unwrap(), 0.75);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let pred = mask(1, 2, &[1, 1]);
        let truth = mask(1, 2, &[2, 2]);
        let (miou, per_class) = mean_iou(&pred, &truth, 3).unwrap();
        assert_eq!(per_class[1], Some(0.0));
        assert_eq!(per_class[2], Some(0.0));
        assert_eq!(per_class[0], None);
        assert_eq!(miou, 0.0);
    }

    #[test]
    fn complementary_binary_masks() {
        let a = mask(2, 2, &[0, 1, 0, 1]);
        let b = mask(2, 2, &[1, 0, 1, 0]);
        assert_eq!(pixel_accuracy(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn zero_union_policy() {
        let m = mask(1, 2, &[0, 0]);
        let mut cm = Confusion::new(4);
        cm.add(&m, &m).unwrap();
        assert_eq!(cm.mean_iou(ZeroUnion::Exclude), 1.0);
        assert_eq!(cm.mean_iou(ZeroUnion::CountAsZero), 0.25);
    }

    #[test]
    fn errors() {
        let a = mask(2, 2, &[0; 4]);
        let b = mask(1, 4, &[0; 4]);
        assert!(mean_iou(&a, &b, 10).is_err());
        assert!(pixel_accuracy(&a, &b).is_err());
        let c = mask(2, 2, &[0, 0, 0, 12]);
        assert!(matches!(mean_iou(&c, &a, 10), Err(Error::LabelOutOfRange { .. })));
    }

    fn record(model: &str, split: &str, attack: &str, miou: f64, loss: f64) -> MetricRecord {
        MetricRecord {
            stage: "train".into(),
            model: model.into(),
            attack: attack.into(),
            split: split.into(),
            miou,
            pixel_acc: 0.5,
            loss,
        }
    }

    #[test]
    fn single_record_one_data_row() {
        let csv = emit_table(&[record("unet", "val", "clean", 0.6912, 0.3)], TableLayout::Csv).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1).unwrap(), "train,unet,clean,val,0.69,0.50,0.30");
        assert!(emit_table(&[], TableLayout::Csv).is_err());
    }

    #[test]
    fn csv_round_trip_to_two_decimals() {
        let recs = vec![
            record("unet", "train", "clean", 0.7311, 0.1649),
            record("linknet", "test", "pgd_linf", 0.3849, 1.3551),
        ];
        let parsed = parse_csv(&emit_table(&recs, TableLayout::Csv).unwrap()).unwrap();
        for (a, b) in recs.iter().zip(&parsed) {
            assert!((a.miou - b.miou).abs() <= 0.005);
            assert!((a.loss - b.loss).abs() <= 0.005);
            assert_eq!(a.attack, b.attack);
        }
    }

    #[test]
    fn standard_grid_rows() {
        let mut recs = Vec::new();
        for model in ["UNet", "LinkNet"] {
            recs.push(record(model, "train", "clean", 0.73, 0.16));
            recs.push(record(model, "val", "clean", 0.69, 0.32));
            recs.push(record(model, "test", "pgd_l2", 0.48, 0.59));
            recs.push(record(model, "test", "pgd_linf", 0.39, 0.8));
        }
        let md = emit_table(&recs, TableLayout::Standard).unwrap();
        let labels: Vec<&str> = md
            .lines()
            .skip(2)
            .map(|l| l.split('|').nth(1).unwrap().trim())
            .collect();
        assert_eq!(
            labels,
            [
                "Train IoU",
                "Train Loss",
                "Val IoU",
                "Val Loss",
                "Test IoU (PGD L2)",
                "Test IoU (PGD L∞)",
                "Test Loss (PGD L2)",
                "Test Loss (PGD L∞)"
            ]
        );
        assert!(md.lines().next().unwrap().contains("UNet | LinkNet"));
        assert!(md.contains("| Train IoU | 0.73 | 0.73 |"));
    }

    #[test]
    fn robust_rows_per_model() {
        let recs = vec![
            record("UNet (PGD L2)", "train", "clean", 0.68, 0.22),
            record("UNet (PGD L2)", "val", "clean", 0.58, 2.44),
        ];
        let md = emit_table(&recs, TableLayout::Robust).unwrap();
        assert!(md.starts_with("| | Train IoU | Val IoU | Train Loss | Val Loss |"));
        assert!(md.contains("| UNet (PGD L2) | 0.68 | 0.58 | 0.22 | 2.44 |"));
    }
}
