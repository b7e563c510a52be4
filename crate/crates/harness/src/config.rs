//! Experiment configuration: line-oriented `key = value` pairs grouped under
//! `[section]` headers. `#` starts a comment line.
//!
//! ```text
//! [run]
//! seed = 1
//! out = runs/unet
//!
//! [data]
//! dir = data/merged
//!
//! [model]
//! architecture = unet
//! base_channels = 8
//!
//! [train]
//! epochs = 20
//! lr = 0.001
//! attack = linf
//!
//! [attack.linf]
//! epsilon = 0.0313725
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. `ADVSEG_OUT` and `ADVSEG_SEED` override `run.out` and `run.seed`;
//! command-line flags override both.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use advseg_core::attacks::{AttackSpec, Init, Norm};
use advseg_core::data::{AugmentSpec, SceneSpec, SplitSpec};
use advseg_core::nn::{Architecture, ModelConfig, REPRESENTATION_LAYER};
use advseg_core::robustify::RobustifyConfig;
use advseg_core::train::TrainConfig;

use crate::error::{HarnessError, Result};

/// Raw sections as parsed from text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| HarnessError::config(format!("line {}", n + 1), "unterminated section header"))?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::config(format!("line {}", n + 1), "expected `key = value`"))?;
            if current.is_empty() {
                return Err(HarnessError::config(k.trim(), "key outside of any section"));
            }
            sections.entry(current.clone()).or_default().insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { sections })
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.into());
    }

    fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e: T::Err| HarnessError::config(format!("{section}.{key}"), format!("`{v}`: {e}"))),
        }
    }

    /// Every `section.key` present, so unknown keys can be reported.
    fn keys(&self) -> Vec<String> {
        self.sections
            .iter()
            .flat_map(|(s, kv)| kv.keys().map(move |k| format!("{s}.{k}")))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    AdvTrain,
    AttackEval,
    Robustify,
    RobustTrain,
    Viz,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Train,
        Stage::AdvTrain,
        Stage::AttackEval,
        Stage::Robustify,
        Stage::RobustTrain,
        Stage::Viz,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::AdvTrain => "adv-train",
            Stage::AttackEval => "attack-eval",
            Stage::Robustify => "robustify",
            Stage::RobustTrain => "robust-train",
            Stage::Viz => "viz",
        }
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| HarnessError::Usage(format!("unknown stage `{s}`")))
    }
}

/// One entry of a generated dataset: a scene family and how many scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneFamily {
    Forest,
    Trail,
}

impl SceneFamily {
    fn as_str(self) -> &'static str {
        match self {
            SceneFamily::Forest => "forest",
            SceneFamily::Trail => "trail",
        }
    }

    pub fn spec(self, seed: u64, size: usize) -> SceneSpec {
        match self {
            SceneFamily::Forest => SceneSpec::forest(seed),
            SceneFamily::Trail => SceneSpec::trail(seed),
        }
        .with_size(size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    /// Dataset read by training and evaluation stages.
    pub dir: Option<PathBuf>,
    /// Original (non-robustified) dataset used for validation in `robust-train`.
    pub original_dir: Option<PathBuf>,
    pub image_size: usize,
    pub sources: Vec<(SceneFamily, usize)>,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub config: ModelConfig,
    /// Weights to start from or evaluate.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizSection {
    pub count: usize,
    pub n_maps: usize,
    pub layer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Name of the attack used during adversarial training.
    pub train_attack: Option<String>,
    /// Named attacks, in evaluation order.
    pub attacks: Vec<(String, AttackSpec)>,
    pub robustify: RobustifyConfig,
    pub viz: VizSection,
}

const KNOWN_KEYS: &[&str] = &[
    "run.seed",
    "run.out",
    "data.dir",
    "data.original_dir",
    "data.image_size",
    "data.sources",
    "data.split",
    "model.architecture",
    "model.stages",
    "model.base_channels",
    "model.num_classes",
    "model.checkpoint",
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "train.augment",
    "train.mix_clean",
    "train.attacked_validation",
    "train.attack",
    "eval.attacks",
    "robustify.steps",
    "robustify.step_norm",
    "robustify.layer",
    "robustify.projection",
    "viz.count",
    "viz.n_maps",
    "viz.layer",
];

const ATTACK_KEYS: &[&str] = &["norm", "epsilon", "alpha", "steps", "init"];

fn parse_sources(v: &str) -> Result<Vec<(SceneFamily, usize)>> {
    let field = "data.sources";
    v.split(',')
        .map(|part| {
            let (fam, n) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| HarnessError::config(field, format!("`{part}` is not family:count")))?;
            let fam = match fam.trim() {
                "forest" => SceneFamily::Forest,
                "trail" => SceneFamily::Trail,
                other => return Err(HarnessError::config(field, format!("unknown scene family `{other}`"))),
            };
            let n = n
                .trim()
                .parse()
                .map_err(|_| HarnessError::config(field, format!("bad count in `{part}`")))?;
            Ok((fam, n))
        })
        .collect()
}

fn parse_split(v: &str) -> Result<SplitSpec> {
    let field = "data.split";
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(HarnessError::config(field, "expected train,val,test"));
    }
    if parts.iter().all(|p| p.parse::<usize>().is_ok()) {
        let c: Vec<usize> = parts.iter().map(|p| p.parse().expect("checked")).collect();
        return Ok(SplitSpec::Counts {
            train: c[0],
            val: c[1],
            test: c[2],
        });
    }
    let r: Vec<f64> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| HarnessError::config(field, format!("`{p}` is not a number"))))
        .collect::<Result<_>>()?;
    Ok(SplitSpec::Ratios {
        train: r[0],
        val: r[1],
        test: r[2],
    })
}

fn parse_projection(v: &str) -> Result<Option<(Norm, f64)>> {
    if v == "none" {
        return Ok(None);
    }
    let field = "robustify.projection";
    let (norm, eps) = v
        .split_once(':')
        .ok_or_else(|| HarnessError::config(field, "expected none or norm:radius"))?;
    let norm: Norm = norm.parse().map_err(|e| HarnessError::config(field, format!("{e}")))?;
    let eps: f64 = eps
        .parse()
        .map_err(|_| HarnessError::config(field, format!("bad radius `{eps}`")))?;
    Ok(Some((norm, eps)))
}

/// `p` joined onto the working directory when relative.
pub fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| advseg_core::Error::Io {
        path: p.to_path_buf(),
        source: e,
    })?;
    Ok(cwd.join(p).components().collect())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn default_attack(name: &str) -> AttackSpec {
    match name {
        "l2" => AttackSpec::pgd_l2(),
        _ => AttackSpec::pgd_linf(),
    }
}

impl ExperimentConfig {
    /// Resolves a parsed config. `base` anchors relative paths.
    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self> {
        for key in raw.keys() {
            let known = KNOWN_KEYS.contains(&key.as_str())
                || key
                    .strip_prefix("attack.")
                    .and_then(|rest| rest.split_once('.'))
                    .is_some_and(|(_, k)| ATTACK_KEYS.contains(&k));
            if !known {
                return Err(HarnessError::config(key, "unknown key"));
            }
        }
        let seed = raw.parse_or("run", "seed", 0u64)?;
        let out = resolve(base, raw.get("run", "out").unwrap_or("out"));

        let data = DataSection {
            dir: raw.get("data", "dir").map(|p| resolve(base, p)),
            original_dir: raw.get("data", "original_dir").map(|p| resolve(base, p)),
            image_size: raw.parse_or("data", "image_size", 64usize)?,
            sources: parse_sources(raw.get("data", "sources").unwrap_or("forest:310,trail:310"))?,
            split: parse_split(raw.get("data", "split").unwrap_or("400,120,100"))?,
        };

        let model = ModelSection {
            config: ModelConfig {
                architecture: raw.parse_or("model", "architecture", Architecture::UNet)?,
                stages: raw.parse_or("model", "stages", 3usize)?,
                base_channels: raw.parse_or("model", "base_channels", 16usize)?,
                num_classes: raw.parse_or("model", "num_classes", advseg_core::data::NUM_CLASSES)?,
                in_channels: 3,
                seed,
            },
            checkpoint: raw.get("model", "checkpoint").map(|p| resolve(base, p)),
        };
        model
            .config
            .validate()
            .map_err(|e| HarnessError::config("model", e.to_string()))?;

        let mut names: Vec<String> = raw
            .get("eval", "attacks")
            .unwrap_or("linf,l2")
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let train_attack = match raw.get("train", "attack").unwrap_or("none") {
            "none" => None,
            a => Some(a.to_string()),
        };
        if let Some(a) = &train_attack {
            if !names.contains(a) {
                names.push(a.clone());
            }
        }
        let mut attacks = Vec::new();
        for name in names {
            let section = format!("attack.{name}");
            let d = default_attack(&name);
            let spec = AttackSpec {
                norm: raw.parse_or(&section, "norm", d.norm)?,
                epsilon: raw.parse_or(&section, "epsilon", d.epsilon)?,
                alpha: raw.parse_or(&section, "alpha", d.alpha)?,
                steps: raw.parse_or(&section, "steps", d.steps)?,
                init: raw.parse_or(&section, "init", Init::Zero)?,
                seed,
            };
            spec.validate().map_err(|e| HarnessError::config(&section, e.to_string()))?;
            attacks.push((name, spec));
        }

        let train = TrainConfig {
            epochs: raw.parse_or("train", "epochs", 100usize)?,
            lr: raw.parse_or("train", "lr", 1e-4)?,
            batch_size: raw.parse_or("train", "batch_size", 8usize)?,
            attack: train_attack
                .as_ref()
                .map(|a| attacks.iter().find(|(n, _)| n == a).expect("added above").1),
            augment: raw.parse_or("train", "augment", true)?.then(AugmentSpec::default),
            mix_clean: raw.parse_or("train", "mix_clean", false)?,
            attacked_validation: raw.parse_or("train", "attacked_validation", false)?,
            seed,
        };
        train.validate().map_err(|e| HarnessError::config("train", e.to_string()))?;

        let robustify = RobustifyConfig {
            steps: raw.parse_or("robustify", "steps", 100usize)?,
            step_norm: raw.parse_or("robustify", "step_norm", 0.1)?,
            seed,
            layer: raw.get("robustify", "layer").unwrap_or(REPRESENTATION_LAYER).to_string(),
            projection: parse_projection(raw.get("robustify", "projection").unwrap_or("none"))?,
        };
        robustify
            .validate()
            .map_err(|e| HarnessError::config("robustify", e.to_string()))?;

        let viz = VizSection {
            count: raw.parse_or("viz", "count", 4usize)?,
            n_maps: raw.parse_or("viz", "n_maps", 16usize)?,
            layer: raw.get("viz", "layer").unwrap_or(REPRESENTATION_LAYER).to_string(),
        };

        Ok(Self {
            seed,
            out,
            data,
            model,
            train,
            train_attack,
            attacks,
            robustify,
            viz,
        })
    }

    /// Reads `path`, applies environment overrides, and resolves.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| advseg_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut raw = RawConfig::parse(&text)?;
        if let Ok(out) = std::env::var("ADVSEG_OUT") {
            raw.set("run", "out", out);
        }
        if let Ok(seed) = std::env::var("ADVSEG_SEED") {
            raw.set("run", "seed", seed);
        }
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_raw(&raw, &absolute(base)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.config.seed = seed;
        self.train.seed = seed;
        self.robustify.seed = seed;
        for (_, a) in &mut self.attacks {
            a.seed = seed;
        }
        if let Some(a) = &mut self.train.attack {
            a.seed = seed;
        }
        self
    }

    pub fn attack(&self, name: &str) -> Option<&AttackSpec> {
        self.attacks.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Checks that the fields `stage` needs are present and that its
    /// inputs exist on disk.
    pub fn validate_for(&self, stage: Stage) -> Result<()> {
        let need_dir = |field: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                None => Err(HarnessError::config(field, format!("required by {}", stage.as_str()))),
                Some(p) if !p.exists() => Err(HarnessError::config(field, format!("{} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match stage {
            Stage::GenData => {
                if self.data.sources.is_empty() {
                    return Err(HarnessError::config("data.sources", "no sources"));
                }
            }
            Stage::Train => need_dir("data.dir", &self.data.dir)?,
            Stage::AdvTrain => {
                need_dir("data.dir", &self.data.dir)?;
                if self.train.attack.is_none() {
                    return Err(HarnessError::config("train.attack", "adv-train needs an attack"));
                }
                if let Some(c) = &self.model.checkpoint {
                    need_dir("model.checkpoint", &Some(c.clone()))?;
                }
            }
            Stage::AttackEval | Stage::Viz => {
                need_dir("data.dir", &self.data.dir)?;
                need_dir("model.checkpoint", &self.model.checkpoint)?;
            }
            Stage::Robustify => {
                need_dir("data.dir", &self.data.dir)?;
                need_dir("model.checkpoint", &self.model.checkpoint)?;
            }
            Stage::RobustTrain => {
                need_dir("data.dir", &self.data.dir)?;
                need_dir("data.original_dir", &self.data.original_dir)?;
            }
        }
        Ok(())
    }

    /// The resolved config in the input syntax, for provenance.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let _ = writeln!(s, "[run]\nseed = {}\nout = {}\n", self.seed, self.out.display());
        let _ = writeln!(s, "[data]");
        if let Some(p) = path(&self.data.dir) {
            let _ = writeln!(s, "dir = {p}");
        }
        if let Some(p) = path(&self.data.original_dir) {
            let _ = writeln!(s, "original_dir = {p}");
        }
        let sources: Vec<String> = self.data.sources.iter().map(|(f, n)| format!("{}:{n}", f.as_str())).collect();
        let split = match self.data.split {
            SplitSpec::Counts { train, val, test } => format!("{train},{val},{test}"),
            SplitSpec::Ratios { train, val, test } => format!("{train},{val},{test}"),
        };
        let _ = writeln!(
            s,
            "image_size = {}\nsources = {}\nsplit = {split}\n",
            self.data.image_size,
            sources.join(",")
        );
        let m = &self.model.config;
        let _ = writeln!(
            s,
            "[model]\narchitecture = {}\nstages = {}\nbase_channels = {}\nnum_classes = {}",
            m.architecture, m.stages, m.base_channels, m.num_classes
        );
        if let Some(p) = path(&self.model.checkpoint) {
            let _ = writeln!(s, "checkpoint = {p}");
        }
        let t = &self.train;
        let _ = writeln!(
            s,
            "\n[train]\nepochs = {}\nlr = {}\nbatch_size = {}\naugment = {}\nmix_clean = {}\nattacked_validation = {}\nattack = {}\n",
            t.epochs,
            t.lr,
            t.batch_size,
            t.augment.is_some(),
            t.mix_clean,
            t.attacked_validation,
            self.train_attack.as_deref().unwrap_or("none")
        );
        let names: Vec<&str> = self.attacks.iter().map(|(n, _)| n.as_str()).collect();
        let _ = writeln!(s, "[eval]\nattacks = {}\n", names.join(","));
        for (name, a) in &self.attacks {
            let init = match a.init {
                Init::Zero => "zero",
                Init::RandomInBall => "random_in_ball",
            };
            let _ = writeln!(
                s,
                "[attack.{name}]\nnorm = {}\nepsilon = {}\nalpha = {}\nsteps = {}\ninit = {init}\n",
                a.norm, a.epsilon, a.alpha, a.steps
            );
        }
        let r = &self.robustify;
        let projection = match r.projection {
            Some((n, e)) => format!("{n}:{e}"),
            None => "none".into(),
        };
        let _ = writeln!(
            s,
            "[robustify]\nsteps = {}\nstep_norm = {}\nlayer = {}\nprojection = {projection}\n",
            r.steps, r.step_norm, r.layer
        );
        let _ = writeln!(s, "[viz]\ncount = {}\nn_maps = {}\nlayer = {}", self.viz.count, self.viz.n_maps, self.viz.layer);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let raw = RawConfig::parse("# c\n[run]\nseed = 7\n[train]\nattack = linf\nepochs=3\n[attack.linf]\nsteps = 2\n").unwrap();
        let c = ExperimentConfig::from_raw(&raw, Path::new("/base")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.attack.unwrap().steps, 2);
        assert_eq!(c.attack("l2").unwrap().epsilon, 10.0);
        assert_eq!(c.out, PathBuf::from("/base/out"));
    }

    #[test]
    fn reports_field_names() {
        let raw = RawConfig::parse("[train]\nepochs = many\n").unwrap();
        let err = ExperimentConfig::from_raw(&raw, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let raw = RawConfig::parse("[train]\nepoch = 3\n").unwrap();
        assert!(ExperimentConfig::from_raw(&raw, Path::new(".")).unwrap_err().to_string().contains("train.epoch"));
        assert!(RawConfig::parse("seed = 1\n").is_err());
        let raw = RawConfig::parse("[train]\nepochs = 0\n").unwrap();
        assert!(ExperimentConfig::from_raw(&raw, Path::new(".")).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let raw = RawConfig::parse("[run]\nseed = 3\n[data]\nsplit = 0.5,0.25,0.25\n[train]\nattack = l2\n[robustify]\nprojection = linf:0.1\n").unwrap();
        let c = ExperimentConfig::from_raw(&raw, Path::new("/x")).unwrap();
        let again = ExperimentConfig::from_raw(&RawConfig::parse(&c.to_ini()).unwrap(), Path::new("/x")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("bogus".parse::<Stage>().unwrap_err().exit_code(), 1);
    }
}
