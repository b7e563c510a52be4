//! Stage runners. Every stage writes into its own output directory:
//! `config.resolved.ini`, a `summary.md`, and stage-specific artifacts
//! (datasets, `checkpoint/`, `metrics.csv`, `history.csv`, grids).

use std::fs;
use std::path::Path;

use advseg_core::attacks::AttackSpec;
use advseg_core::data::{self, LabeledDataset, Split};
use advseg_core::exec::Execution;
use advseg_core::fsutil::atomic_write;
use advseg_core::metrics::{emit_table, MetricRecord, TableLayout};
use advseg_core::nn::{self, SegModel};
use advseg_core::robustify::{self, RobustifyReport};
use advseg_core::train::{self, ExperimentRecord};
use log::info;

use crate::config::{ExperimentConfig, Stage};
use crate::error::{HarnessError, Result};
use crate::grid;

pub const RESOLVED_CONFIG: &str = "config.resolved.ini";
pub const METRICS_CSV: &str = "metrics.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DATASET_DIR: &str = "dataset";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub overwrite: bool,
    pub exec: Execution,
}

/// What a stage produced, for callers that keep going in-process.
#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    pub records: Vec<MetricRecord>,
    pub history: Option<ExperimentRecord>,
    pub model: Option<SegModel>,
    pub dataset: Option<LabeledDataset>,
    pub robustify: Option<RobustifyReport>,
}

/// Prepares `out`: refuses a non-empty directory unless `overwrite` is set,
/// and then only replaces directories that hold a previous stage's output.
pub fn prepare_output(out: &Path, overwrite: bool) -> Result<()> {
    let occupied = out.exists()
        && fs::read_dir(out)
            .map_err(|e| advseg_core::Error::Io {
                path: out.to_path_buf(),
                source: e,
            })?
            .next()
            .is_some();
    if occupied {
        if !overwrite || !out.join(RESOLVED_CONFIG).exists() {
            return Err(HarnessError::OutputExists(out.to_path_buf()));
        }
        fs::remove_dir_all(out).map_err(|e| advseg_core::Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
    }
    fs::create_dir_all(out).map_err(|e| advseg_core::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    Ok(atomic_write(&out.join(name), text.as_bytes())?)
}

fn write_metrics(out: &Path, records: &[MetricRecord], layout: TableLayout, title: &str) -> Result<()> {
    write(out, METRICS_CSV, &emit_table(records, TableLayout::Csv)?)?;
    write(out, SUMMARY_MD, &format!("# {title}\n\n{}", emit_table(records, layout)?))
}

/// Runs `stage` with `cfg`, writing into `cfg.out`.
pub fn run(stage: Stage, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StageOutput> {
    cfg.validate_for(stage)?;
    prepare_output(&cfg.out, opts.overwrite)?;
    write(&cfg.out, RESOLVED_CONFIG, &cfg.to_ini())?;
    info!("{} -> {}", stage.as_str(), cfg.out.display());
    match stage {
        Stage::GenData => gen_data(cfg, opts),
        Stage::Train | Stage::AdvTrain => train_stage(stage, cfg, opts),
        Stage::AttackEval => attack_eval(cfg, opts),
        Stage::Robustify => robustify_stage(cfg, opts),
        Stage::RobustTrain => robust_train(cfg, opts),
        Stage::Viz => viz(cfg, opts),
    }
}

fn gen_data(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StageOutput> {
    let mut merged = LabeledDataset::empty();
    for (i, (family, count)) in cfg.data.sources.iter().enumerate() {
        let spec = family.spec(cfg.seed.wrapping_add(i as u64), cfg.data.image_size);
        let part = data::generate_dataset(&spec, *count, opts.exec)?;
        merged = data::merge_datasets(&merged, &part)?;
    }
    let d = data::split_dataset(&merged, cfg.data.split, cfg.seed)?;
    data::save_dataset(&d, &cfg.out.join(DATASET_DIR))?;
    let hist = d.class_histogram();
    let total: u64 = hist.iter().sum();
    let mut csv = String::from("class,name,pixels,fraction\n");
    let mut md = format!(
        "# Generated dataset\n\n{} images ({} train / {} val / {} test)\n\n| Class | Name | Fraction |\n|---|---|---|\n",
        d.len(),
        d.indices(Split::Train).len(),
        d.indices(Split::Val).len(),
        d.indices(Split::Test).len()
    );
    for (c, &n) in hist.iter().enumerate() {
        let f = n as f64 / total.max(1) as f64;
        csv.push_str(&format!("{c},{},{n},{f:.6}\n", d.class_names[c]));
        md.push_str(&format!("| {c} | {} | {f:.4} |\n", d.class_names[c]));
    }
    write(&cfg.out, "class_histogram.csv", &csv)?;
    write(&cfg.out, SUMMARY_MD, &md)?;
    Ok(StageOutput {
        dataset: Some(d),
        ..StageOutput::default()
    })
}

fn load_data(dir: &Option<std::path::PathBuf>) -> Result<LabeledDataset> {
    Ok(data::load_dataset(dir.as_deref().expect("validated"))?)
}

/// Model label used in tables, e.g. `unet` or `unet+pgd_linf`.
pub fn model_label(model: &SegModel, trained_attack: Option<&str>) -> String {
    match trained_attack {
        Some(a) => format!("{}+{a}", model.config().architecture),
        None => model.config().architecture.to_string(),
    }
}

/// Clean scores on every split present plus attacked scores on val and test.
fn score_splits(
    stage: &str,
    label: &str,
    model: &SegModel,
    d: &LabeledDataset,
    attacks: &[(String, AttackSpec)],
    exec: Execution,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let part = d.subset(split);
        if part.is_empty() {
            continue;
        }
        let clean = train::evaluate(model, &part, None, exec)?;
        records.push(MetricRecord::new(stage, label, split.as_str(), &clean));
        if split == Split::Train {
            continue;
        }
        for (_, spec) in attacks {
            let r = train::evaluate(model, &part, Some(spec), exec)?;
            records.push(MetricRecord::new(stage, label, split.as_str(), &r));
        }
    }
    Ok(records)
}

fn train_stage(stage: Stage, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StageOutput> {
    let d = load_data(&cfg.data.dir)?;
    let (start, tc) = match stage {
        Stage::Train => (SegModel::new(&cfg.model.config)?, train::TrainConfig { attack: None, ..cfg.train.clone() }),
        _ => {
            let start = match &cfg.model.checkpoint {
                Some(p) => nn::load_checkpoint(p)?.0,
                None => SegModel::new(&cfg.model.config)?,
            };
            (start, cfg.train.clone())
        }
    };
    let trained_attack = tc.attack.as_ref().map(AttackSpec::tag);
    let (model, history) = train::train_with_progress(&start, &d, &tc, opts.exec, &mut |rows| {
        if let Some(r) = rows.last() {
            info!("epoch {} {} loss {:.4} miou {:.4}", r.epoch, r.split, r.loss, r.miou);
        }
    })?;
    nn::save_checkpoint(&model, trained_attack.as_deref(), &cfg.out.join(CHECKPOINT_DIR))?;
    write(&cfg.out, HISTORY_CSV, &history.to_csv())?;
    let label = model_label(&model, trained_attack.as_deref());
    let records = score_splits(stage.as_str(), &label, &model, &d, &cfg.attacks, opts.exec)?;
    let layout = if stage == Stage::Train { TableLayout::Standard } else { TableLayout::Adversarial };
    write_metrics(&cfg.out, &records, layout, &format!("{} ({label})", stage.as_str()))?;
    Ok(StageOutput {
        records,
        history: Some(history),
        model: Some(model),
        ..StageOutput::default()
    })
}

fn attack_eval(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StageOutput> {
    let d = load_data(&cfg.data.dir)?;
    let (model, meta) = nn::load_checkpoint(cfg.model.checkpoint.as_deref().expect("validated"))?;
    let label = model_label(&model, meta.trained_attack.as_deref());
    let records = score_splits("attack-eval", &label, &model, &d, &cfg.attacks, opts.exec)?;
    write_metrics(&cfg.out, &records, TableLayout::Standard, &format!("attack-eval ({label})"))?;
    let test = d.subset(Split::Test);
    let specs: Vec<&AttackSpec> = cfg.attacks.iter().map(|(_, a)| a).collect();
    grid::save_prediction_grid(&model, &test, cfg.viz.count, &specs, &cfg.out.join("grid.png"), opts.exec)?;
    Ok(StageOutput {
        records,
        model: Some(model),
        ..StageOutput::default()
    })
}

fn robustify_stage(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StageOutput> {
    let d = load_data(&cfg.data.dir)?;
    let (model, meta) = nn::load_checkpoint(cfg.model.checkpoint.as_deref().expect("validated"))?;
    if meta.trained_attack.is_none() {
        log::warn!("robustifying with a model that was not adversarially trained");
    }
    let train_part = d.subset(Split::Train);
    let (robust, report) = robustify::robustify_dataset(&model, &train_part, &cfg.robustify, opts.exec)?;
    robustify::save_robustified(&robust, &cfg.out.join(DATASET_DIR), &model, meta.trained_attack.as_deref(), &cfg.robustify)?;
    let mut csv = String::from("index,start_index,initial_distance,final_distance\n");
    for (i, t) in report.traces.iter().enumerate() {
        csv.push_str(&format!("{i},{},{:.6},{:.6}\n", report.pairing[i], t.initial_distance, t.final_distance));
    }
    write(&cfg.out, "robustify.csv", &csv)?;
    write(
        &cfg.out,
        SUMMARY_MD,
        &format!(
            "# Robustified dataset\n\nsource model: {} ({})\n\n| Samples | Mean initial distance | Mean final distance | Improved |\n|---|---|---|---|\n| {} | {:.4} | {:.4} | {:.2}% |\n",
            model_label(&model, meta.trained_attack.as_deref()),
            model.fingerprint(),
            robust.len(),
            report.mean_initial(),
            report.mean_final(),
            100.0 * report.fraction_improved()
        ),
    )?;
    Ok(StageOutput {
        dataset: Some(robust),
        robustify: Some(report),
        model: Some(model),
        ..StageOutput::default()
    })
}

fn robust_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StageOutput> {
    let robust = load_data(&cfg.data.dir)?.subset(Split::Train);
    let original = load_data(&cfg.data.original_dir)?;
    let eval_part = original.select(
        &(0..original.len())
            .filter(|&i| original.splits[i] != Split::Train)
            .collect::<Vec<_>>(),
    );
    let combined = data::merge_datasets(&robust, &eval_part)?;
    let start = SegModel::new(&cfg.model.config)?;
    let tc = train::TrainConfig {
        attack: None,
        ..cfg.train.clone()
    };
    let (model, history) = train::train(&start, &combined, &tc, opts.exec)?;
    nn::save_checkpoint(&model, None, &cfg.out.join(CHECKPOINT_DIR))?;
    write(&cfg.out, HISTORY_CSV, &history.to_csv())?;
    let label = format!("{}+robust", model.config().architecture);
    let records = score_splits("robust-train", &label, &model, &combined, &cfg.attacks, opts.exec)?;
    write_metrics(&cfg.out, &records, TableLayout::Robust, "robust-train")?;
    Ok(StageOutput {
        records,
        history: Some(history),
        model: Some(model),
        ..StageOutput::default()
    })
}

fn viz(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StageOutput> {
    let d = load_data(&cfg.data.dir)?;
    let (model, meta) = nn::load_checkpoint(cfg.model.checkpoint.as_deref().expect("validated"))?;
    let test = d.subset(Split::Test);
    let part = if test.is_empty() { d.clone() } else { test };
    let specs: Vec<&AttackSpec> = cfg.attacks.iter().map(|(_, a)| a).collect();
    grid::save_prediction_grid(&model, &part, cfg.viz.count, &specs, &cfg.out.join("grid.png"), opts.exec)?;
    let acts = nn::dump_activations(&model, &part.images[0], &cfg.viz.layer, cfg.viz.n_maps)?;
    grid::save_gray(&acts, &cfg.out.join("activations.png"))?;
    write(
        &cfg.out,
        SUMMARY_MD,
        &format!(
            "# Qualitative results ({})\n\n![predictions](grid.png)\n\nColumns: input, ground truth, prediction, then per attack the perturbed input and its prediction.\n\n![activations](activations.png)\n\nFirst {} channels of `{}`.\n",
            model_label(&model, meta.trained_attack.as_deref()),
            cfg.viz.n_maps,
            cfg.viz.layer
        ),
    )?;
    Ok(StageOutput {
        model: Some(model),
        ..StageOutput::default()
    })
}
