//! Signed metric deltas between two `metrics.csv` files.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use advseg_core::metrics::{parse_csv, MetricRecord};

use crate::error::{HarnessError, Result};
use crate::stages::METRICS_CSV;

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub split: String,
    pub attack: String,
    pub baseline_miou: f64,
    pub candidate_miou: f64,
    /// candidate minus baseline
    pub miou: f64,
    pub pixel_acc: f64,
    pub loss: f64,
    /// IoU or accuracy dropped, or loss rose, by more than the tolerance.
    pub regression: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline_model: String,
    pub candidate_model: String,
    pub tolerance: f64,
    pub rows: Vec<DeltaRow>,
}

impl Comparison {
    pub fn has_regression(&self) -> bool {
        self.rows.iter().any(|r| r.regression)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,attack,baseline_miou,candidate_miou,delta_miou,delta_pixel_acc,delta_loss,regression\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.2},{:.2},{:+.2},{:+.2},{:+.2},{}",
                r.split, r.attack, r.baseline_miou, r.candidate_miou, r.miou, r.pixel_acc, r.loss, r.regression
            )
            .unwrap();
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "# {} vs {}\n\nTolerance {:.2}\n\n| Split | Attack | Baseline IoU | Candidate IoU | ΔIoU | ΔAcc | ΔLoss | |\n|---|---|---|---|---|---|---|---|\n",
            self.candidate_model, self.baseline_model, self.tolerance
        );
        for r in &self.rows {
            writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} | {:+.2} | {:+.2} | {:+.2} | {} |",
                r.split,
                r.attack,
                r.baseline_miou,
                r.candidate_miou,
                r.miou,
                r.pixel_acc,
                r.loss,
                if r.regression { "regression" } else { "" }
            )
            .unwrap();
        }
        s
    }
}

type Keyed<'a> = BTreeMap<(String, String), &'a MetricRecord>;

fn key<'a>(records: &'a [MetricRecord], which: &str) -> Result<(Keyed<'a>, String)> {
    let mut map = BTreeMap::new();
    for r in records {
        if map.insert((r.split.clone(), r.attack.clone()), r).is_some() {
            return Err(HarnessError::Schema(format!(
                "{which} has more than one row for split `{}` attack `{}`",
                r.split, r.attack
            )));
        }
    }
    let model = records.first().map_or_else(String::new, |r| r.model.clone());
    Ok((map, model))
}

/// Compares two record sets covering the same (split, attack) rows.
pub fn compare(baseline: &[MetricRecord], candidate: &[MetricRecord], tolerance: f64) -> Result<Comparison> {
    let (a, baseline_model) = key(baseline, "baseline")?;
    let (b, candidate_model) = key(candidate, "candidate")?;
    if a.is_empty() {
        return Err(HarnessError::Schema("no metric rows".into()));
    }
    if a.keys().ne(b.keys()) {
        let fmt = |m: &Keyed| m.keys().map(|(s, at)| format!("{s}/{at}")).collect::<Vec<_>>().join(", ");
        return Err(HarnessError::Schema(format!(
            "row sets differ: baseline [{}] vs candidate [{}]",
            fmt(&a),
            fmt(&b)
        )));
    }
    let rows = a
        .iter()
        .map(|((split, attack), ra)| {
            let rb = b[&(split.clone(), attack.clone())];
            let (miou, pixel_acc, loss) = (rb.miou - ra.miou, rb.pixel_acc - ra.pixel_acc, rb.loss - ra.loss);
            DeltaRow {
                split: split.clone(),
                attack: attack.clone(),
                baseline_miou: ra.miou,
                candidate_miou: rb.miou,
                miou,
                pixel_acc,
                loss,
                regression: miou < -tolerance || pixel_acc < -tolerance || loss > tolerance,
            }
        })
        .collect();
    Ok(Comparison {
        baseline_model,
        candidate_model,
        tolerance,
        rows,
    })
}

/// Reads `metrics.csv` from `path`, or from `path/metrics.csv` for a stage directory.
pub fn load_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = if path.is_dir() { path.join(METRICS_CSV) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| advseg_core::Error::Io {
        path: file.clone(),
        source: e,
    })?;
    parse_csv(&text).map_err(|e| HarnessError::Schema(format!("{}: {e}", file.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(split: &str, attack: &str, miou: f64) -> MetricRecord {
        MetricRecord {
            stage: "train".into(),
            model: "unet".into(),
            attack: attack.into(),
            split: split.into(),
            miou,
            pixel_acc: miou,
            loss: 1.0 - miou,
        }
    }

    #[test]
    fn self_comparison_is_all_zero() {
        let a = vec![rec("test", "clean", 0.8), rec("test", "pgd_linf", 0.3)];
        let c = compare(&a, &a, 0.0).unwrap();
        assert!(c.rows.iter().all(|r| r.miou == 0.0 && r.loss == 0.0 && !r.regression));
    }

    #[test]
    fn flags_drops_beyond_tolerance() {
        let a = vec![rec("test", "clean", 0.8), rec("test", "pgd_linf", 0.3)];
        let b = vec![rec("test", "clean", 0.78), rec("test", "pgd_linf", 0.5)];
        let c = compare(&a, &b, 0.05).unwrap();
        assert!(!c.has_regression());
        let c = compare(&a, &b, 0.01).unwrap();
        assert!(c.rows.iter().find(|r| r.attack == "clean").unwrap().regression);
        assert!(c.to_markdown().contains("regression"));
    }

    #[test]
    fn mismatched_rows_are_a_schema_error() {
        let a = vec![rec("test", "clean", 0.8)];
        let b = vec![rec("val", "clean", 0.8)];
        assert!(matches!(compare(&a, &b, 0.0), Err(HarnessError::Schema(_))));
        let dup = vec![rec("test", "clean", 0.8), rec("test", "clean", 0.7)];
        assert!(matches!(compare(&dup, &dup, 0.0), Err(HarnessError::Schema(_))));
    }
}
