//! End-to-end runs of the `advseg` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = "\
[run]
seed = 4

[data]
dir = data/dataset
image_size = 16
sources = forest:8,trail:8
split = 8,4,4

[model]
base_channels = 4
stages = 2

[train]
epochs = 1
lr = 1e-3
batch_size = 4

[attack.linf]
steps = 1

[attack.l2]
steps = 1
";

fn advseg(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_advseg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("ADVSEG_OUT")
        .env_remove("ADVSEG_SEED")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.ini"), config).unwrap();
    dir
}

#[test]
fn usage_errors_exit_with_1() {
    let dir = setup(TINY);
    assert_eq!(advseg(dir.path(), &["bogus"]).0, 1);
    assert_eq!(advseg(dir.path(), &["train"]).0, 1);
    assert_eq!(advseg(dir.path(), &["train", "--config", "exp.ini", "--seed", "x"]).0, 1);
    assert_eq!(advseg(dir.path(), &["--help"]).0, 0);
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = setup(TINY);
    let (code, err) = advseg(dir.path(), &["train", "--config", "missing.ini"]);
    assert_eq!(code, 2, "{err}");
    let (code, err) = advseg(dir.path(), &["train", "--config", "exp.ini", "--out", "t"]);
    assert_eq!(code, 2);
    assert!(err.contains("data.dir"), "{err}");
    fs::write(dir.path().join("bad.ini"), format!("{TINY}\n[viz]\ncolour = red\n")).unwrap();
    let (code, err) = advseg(dir.path(), &["gen-data", "--config", "bad.ini"]);
    assert_eq!(code, 2);
    assert!(err.contains("viz.colour"), "{err}");
    fs::write(dir.path().join("neg.ini"), TINY.replace("lr = 1e-3", "lr = -1")).unwrap();
    assert_eq!(advseg(dir.path(), &["gen-data", "--config", "neg.ini"]).0, 2);
}

#[test]
fn divergent_training_exits_with_3() {
    let dir = setup(&TINY.replace("lr = 1e-3", "lr = 1e300"));
    assert_eq!(advseg(dir.path(), &["gen-data", "--config", "exp.ini", "--out", "data"]).0, 0);
    let (code, err) = advseg(dir.path(), &["train", "--config", "exp.ini", "--out", "t"]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn stages_refuse_to_overwrite_without_flag() {
    let dir = setup(TINY);
    assert_eq!(advseg(dir.path(), &["gen-data", "--config", "exp.ini", "--out", "data"]).0, 0);
    let (code, err) = advseg(dir.path(), &["gen-data", "--config", "exp.ini", "--out", "data"]);
    assert_eq!(code, 2);
    assert!(err.contains("--overwrite"), "{err}");
    assert_eq!(advseg(dir.path(), &["gen-data", "--config", "exp.ini", "--out", "data", "--overwrite"]).0, 0);
    fs::create_dir(dir.path().join("precious")).unwrap();
    fs::write(dir.path().join("precious/notes.txt"), "keep").unwrap();
    let (code, _) = advseg(dir.path(), &["gen-data", "--config", "exp.ini", "--out", "precious", "--overwrite"]);
    assert_eq!(code, 2, "directories that are not stage outputs are never replaced");
    assert!(dir.path().join("precious/notes.txt").exists());
}

#[test]
fn same_seed_reproduces_csvs_and_compare_of_a_run_with_itself_is_zero() {
    let dir = setup(TINY);
    let run = |args: &[&str]| {
        let (code, err) = advseg(dir.path(), args);
        assert_eq!(code, 0, "{args:?}: {err}");
    };
    run(&["gen-data", "--config", "exp.ini", "--out", "data"]);
    run(&["gen-data", "--config", "exp.ini", "--out", "data2"]);
    for f in ["class_histogram.csv", "dataset/manifest.txt", "dataset/images/00003.png", "dataset/masks/00003.png"] {
        assert_eq!(fs::read(dir.path().join("data").join(f)).unwrap(), fs::read(dir.path().join("data2").join(f)).unwrap(), "{f}");
    }
    run(&["train", "--config", "exp.ini", "--out", "a"]);
    run(&["train", "--config", "exp.ini", "--out", "b", "--sequential"]);
    for f in ["metrics.csv", "history.csv", "checkpoint/weights.bin"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    run(&["train", "--config", "exp.ini", "--out", "c", "--seed", "5"]);
    assert_ne!(fs::read(dir.path().join("a/history.csv")).unwrap(), fs::read(dir.path().join("c/history.csv")).unwrap());

    run(&["compare", "a", "b", "--out", "cmp"]);
    let csv = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(&f[4..], &["+0.00", "+0.00", "+0.00", "false"], "{row}");
    }

    fs::write(dir.path().join("other.csv"), "stage,model,attack,split,miou,pixel_acc,loss\ntrain,unet,clean,val,0.5,0.5,1.0\n").unwrap();
    let (code, err) = advseg(dir.path(), &["compare", "a", "other.csv"]);
    assert_eq!(code, 2);
    assert!(err.contains("schema"), "{err}");
}

#[test]
fn resolved_config_reloads_to_the_same_experiment() {
    let dir = setup(TINY);
    assert_eq!(advseg(dir.path(), &["gen-data", "--config", "exp.ini", "--out", "data", "--seed", "9"]).0, 0);
    let resolved = dir.path().join("data/config.resolved.ini");
    let a = advseg::ExperimentConfig::load(&resolved).unwrap();
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed = 9"), "{text}");
    assert_eq!(a.seed, 9);
    assert_eq!(a.to_ini(), text);
}
