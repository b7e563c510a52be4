use std::path::PathBuf;
use std::process::ExitCode;

use advseg::compare;
use advseg::config::{ExperimentConfig, Stage};
use advseg::error::{HarnessError, Result};
use advseg::stages::{self, RunOptions, SUMMARY_MD};
use advseg_core::fsutil::atomic_write;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advseg", version, about = "Adversarial robustness experiments for terrain segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config (INI).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory from a previous run.
    #[arg(long)]
    overwrite: bool,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, merge and split a synthetic terrain dataset.
    GenData(StageArgs),
    /// Standard training.
    Train(StageArgs),
    /// Adversarial training, optionally warm-started from a checkpoint.
    AdvTrain(StageArgs),
    /// Score a checkpoint on clean and attacked inputs.
    AttackEval(StageArgs),
    /// Build a robustified training set from a robust model's representations.
    Robustify(StageArgs),
    /// Standard training on a robustified dataset.
    RobustTrain(StageArgs),
    /// Prediction grids and activation maps.
    Viz(StageArgs),
    /// Signed metric deltas between two runs.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        /// Drops larger than this are flagged as regressions.
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        /// Directory for compare.csv and summary.md.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

fn run_stage(stage: Stage, args: StageArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = args.out {
        cfg.out = advseg::config::absolute(&out)?;
    }
    let mut opts = RunOptions {
        overwrite: args.overwrite,
        ..RunOptions::default()
    };
    if args.sequential {
        opts.exec = advseg_core::exec::Execution::Sequential;
    }
    stages::run(stage, &cfg, &opts)?;
    let summary = cfg.out.join(SUMMARY_MD);
    if let Ok(text) = std::fs::read_to_string(&summary) {
        println!("{text}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => run_stage(Stage::GenData, a),
        Command::Train(a) => run_stage(Stage::Train, a),
        Command::AdvTrain(a) => run_stage(Stage::AdvTrain, a),
        Command::AttackEval(a) => run_stage(Stage::AttackEval, a),
        Command::Robustify(a) => run_stage(Stage::Robustify, a),
        Command::RobustTrain(a) => run_stage(Stage::RobustTrain, a),
        Command::Viz(a) => run_stage(Stage::Viz, a),
        Command::Compare {
            baseline,
            candidate,
            tolerance,
            out,
            overwrite,
        } => {
            if !(tolerance >= 0.0) {
                return Err(HarnessError::config("tolerance", "must be non-negative"));
            }
            let a = compare::load_records(&baseline)?;
            let b = compare::load_records(&candidate)?;
            let cmp = compare::compare(&a, &b, tolerance)?;
            let md = cmp.to_markdown();
            if let Some(out) = out {
                stages::prepare_output(&out, overwrite)?;
                atomic_write(&out.join(stages::RESOLVED_CONFIG), format!("[compare]\nbaseline = {}\ncandidate = {}\ntolerance = {tolerance}\n", baseline.display(), candidate.display()).as_bytes())?;
                atomic_write(&out.join("compare.csv"), cmp.to_csv().as_bytes())?;
                atomic_write(&out.join(SUMMARY_MD), md.as_bytes())?;
            }
            println!("{md}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
