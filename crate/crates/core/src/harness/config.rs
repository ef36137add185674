//! Flat `key = value` experiment configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are rejected. Lists are comma-separated.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | master seed for every random choice |
//! | `dataset` | `synthetic` | `synthetic` or `cifar10` |
//! | `train_per_class`, `test_per_class` | 150, 100 | synthetic split sizes |
//! | `cifar_train`, `cifar_test` | none | CIFAR-10 batch files |
//! | `cifar_grayscale` | true | collapse RGB to luminance |
//! | `image_side`, `channels`, `patch_size`, `embed_dim`, `n_heads`, `n_layers`, `mlp_dim`, `n_classes` | 16, 1, 4, 32, 2, 2, 64, 4 | model geometry |
//! | `train_epochs`, `train_lr`, `train_batch` | 10, 0.003, 16 | clean training |
//! | `target_class`, `budget`, `lambda` | 0, 1, 1 | trigger target, patch count, attention weight |
//! | `layers` | `all` | zero-based layers in the attention term |
//! | `trigger_steps`, `trigger_lr` | 300, 0.05 | trigger optimization |
//! | `surgery` | `project` | `project` or `primary_only` for both optimizers |
//! | `attack_batch` | 128 | images sampled from the test split |
//! | `threshold`, `insert_epochs`, `insert_lr`, `insert_batch` | 0.0005, 40, 0.05, 16 | insertion |
//! | `e_sweep` | `0,0.0005,0.001,0.002,0.003` | thresholds for the sweep table |
//! | `lambda_sweep` | `0,1` | trigger weights for the sweep table |
//! | `area_baseline` | true | compare against a contiguous block trigger |
//! | `area_top`, `area_left`, `area_side` | 10, 10, 4 | block placement in pixels |
//! | `defense` | true | run the head-decomposition pair |
//! | `defense_factors` | 2 | factor count |
//! | `defense_inner` | rows of the head | inner dimensions |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::trigger::{SurgeryMode, TriggerConfig};
use crate::trojan::InsertionConfig;
use crate::vit::{TrainConfig, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub cifar_train: Option<PathBuf>,
    pub cifar_test: Option<PathBuf>,
    pub cifar_grayscale: bool,
    pub model: ViTConfig,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub target_class: usize,
    pub budget: usize,
    pub lambda: f64,
    pub layers: Option<Vec<usize>>,
    pub trigger_steps: usize,
    pub trigger_lr: f64,
    pub surgery: SurgeryMode,
    pub attack_batch: usize,
    pub threshold: f64,
    pub insert_epochs: usize,
    pub insert_lr: f64,
    pub insert_batch: usize,
    pub e_sweep: Vec<f64>,
    pub lambda_sweep: Vec<f64>,
    pub area_baseline: bool,
    pub area_top: usize,
    pub area_left: usize,
    pub area_side: usize,
    pub defense: bool,
    pub defense_factors: usize,
    pub defense_inner: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let insert = InsertionConfig::default();
        let trigger = TriggerConfig::default();
        Self {
            seed: 0,
            dataset: DatasetKind::Synthetic,
            train_per_class: 150,
            test_per_class: 100,
            cifar_train: None,
            cifar_test: None,
            cifar_grayscale: true,
            model: ViTConfig::default(),
            train_epochs: 10,
            train_lr: 3e-3,
            train_batch: 16,
            target_class: trigger.target_class,
            budget: trigger.budget,
            lambda: trigger.lambda,
            layers: None,
            trigger_steps: trigger.steps,
            trigger_lr: trigger.lr,
            surgery: SurgeryMode::Project,
            attack_batch: 128,
            threshold: insert.threshold,
            insert_epochs: insert.epochs,
            insert_lr: insert.lr,
            insert_batch: insert.batch,
            e_sweep: vec![0.0, 5e-4, 1e-3, 2e-3, 3e-3],
            lambda_sweep: vec![0.0, 1.0],
            area_baseline: true,
            area_top: 10,
            area_left: 10,
            area_side: 4,
            defense: true,
            defense_factors: 2,
            defense_inner: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            c.set(key, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar10" => DatasetKind::Cifar10,
                    _ => return Err(Error::Config(format!("unknown dataset {v:?}"))),
                }
            }
            "train_per_class" => self.train_per_class = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "cifar_train" => self.cifar_train = Some(PathBuf::from(v)),
            "cifar_test" => self.cifar_test = Some(PathBuf::from(v)),
            "cifar_grayscale" => self.cifar_grayscale = parse_bool(key, v)?,
            "image_side" => self.model.image_side = parse(key, v)?,
            "channels" => self.model.channels = parse(key, v)?,
            "patch_size" => self.model.patch_size = parse(key, v)?,
            "embed_dim" => self.model.embed_dim = parse(key, v)?,
            "n_heads" => self.model.n_heads = parse(key, v)?,
            "n_layers" => self.model.n_layers = parse(key, v)?,
            "mlp_dim" => self.model.mlp_dim = parse(key, v)?,
            "n_classes" => self.model.n_classes = parse(key, v)?,
            "train_epochs" => self.train_epochs = parse(key, v)?,
            "train_lr" => self.train_lr = parse(key, v)?,
            "train_batch" => self.train_batch = parse(key, v)?,
            "target_class" => self.target_class = parse(key, v)?,
            "budget" => self.budget = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "layers" => self.layers = if v == "all" { None } else { Some(parse_list(key, v)?) },
            "trigger_steps" => self.trigger_steps = parse(key, v)?,
            "trigger_lr" => self.trigger_lr = parse(key, v)?,
            "surgery" => self.surgery = parse(key, v)?,
            "attack_batch" => self.attack_batch = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "insert_epochs" => self.insert_epochs = parse(key, v)?,
            "insert_lr" => self.insert_lr = parse(key, v)?,
            "insert_batch" => self.insert_batch = parse(key, v)?,
            "e_sweep" => self.e_sweep = parse_list(key, v)?,
            "lambda_sweep" => self.lambda_sweep = parse_list(key, v)?,
            "area_baseline" => self.area_baseline = parse_bool(key, v)?,
            "area_top" => self.area_top = parse(key, v)?,
            "area_left" => self.area_left = parse(key, v)?,
            "area_side" => self.area_side = parse(key, v)?,
            "defense" => self.defense = parse_bool(key, v)?,
            "defense_factors" => self.defense_factors = parse(key, v)?,
            "defense_inner" => self.defense_inner = if v.is_empty() { None } else { Some(parse_list(key, v)?) },
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.dataset == DatasetKind::Synthetic && (self.train_per_class == 0 || self.test_per_class == 0) {
            return Err(Error::Config("synthetic split sizes must be positive".into()));
        }
        if self.dataset == DatasetKind::Cifar10 {
            if self.cifar_train.is_none() || self.cifar_test.is_none() {
                return Err(Error::Config("cifar10 needs cifar_train and cifar_test".into()));
            }
            let channels = if self.cifar_grayscale { 1 } else { 3 };
            if self.model.channels != channels || self.model.image_side > 32 || self.model.n_classes != 10 {
                return Err(Error::Config(format!(
                    "cifar10 needs {channels} channel(s), image_side <= 32 and 10 classes"
                )));
            }
        }
        if self.target_class >= self.model.n_classes {
            return Err(Error::Config(format!(
                "target class {} outside 0..{}",
                self.target_class, self.model.n_classes
            )));
        }
        if self.budget == 0 || self.budget > self.model.n_patches() {
            return Err(Error::Config(format!("budget {} outside 1..={}", self.budget, self.model.n_patches())));
        }
        if self.attack_batch == 0 {
            return Err(Error::Config("attack_batch must be positive".into()));
        }
        if self.lambda < 0.0 || self.lambda_sweep.iter().any(|&l| l < 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.e_sweep.iter().any(|&e| e < 0.0) {
            return Err(Error::Config("sweep thresholds must be >= 0".into()));
        }
        self.insertion(self.threshold).validate()?;
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            lr: self.train_lr,
            batch_size: self.train_batch,
            seed: self.seed,
        }
    }

    pub fn trigger(&self, lambda: f64) -> TriggerConfig {
        TriggerConfig {
            budget: self.budget,
            target_class: self.target_class,
            lambda,
            layer_set: self.layers.clone(),
            steps: self.trigger_steps,
            lr: self.trigger_lr,
            surgery: self.surgery,
        }
    }

    pub fn insertion(&self, threshold: f64) -> InsertionConfig {
        InsertionConfig {
            threshold,
            epochs: self.insert_epochs,
            lr: self.insert_lr,
            batch: self.insert_batch,
            surgery: self.surgery,
        }
    }

    pub fn defense_config(&self) -> DefenseConfig {
        DefenseConfig {
            factors: self.defense_factors,
            inner_dims: self.defense_inner.clone(),
        }
    }

    /// Canonical text form; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv(
            "dataset",
            match self.dataset {
                DatasetKind::Synthetic => "synthetic",
                DatasetKind::Cifar10 => "cifar10",
            }
            .into(),
        );
        kv("train_per_class", self.train_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        if let Some(p) = &self.cifar_train {
            kv("cifar_train", p.display().to_string());
        }
        if let Some(p) = &self.cifar_test {
            kv("cifar_test", p.display().to_string());
        }
        kv("cifar_grayscale", self.cifar_grayscale.to_string());
        for (k, v) in [
            ("image_side", m.image_side),
            ("channels", m.channels),
            ("patch_size", m.patch_size),
            ("embed_dim", m.embed_dim),
            ("n_heads", m.n_heads),
            ("n_layers", m.n_layers),
            ("mlp_dim", m.mlp_dim),
            ("n_classes", m.n_classes),
        ] {
            kv(k, v.to_string());
        }
        kv("train_epochs", self.train_epochs.to_string());
        kv("train_lr", self.train_lr.to_string());
        kv("train_batch", self.train_batch.to_string());
        kv("target_class", self.target_class.to_string());
        kv("budget", self.budget.to_string());
        kv("lambda", self.lambda.to_string());
        kv("layers", self.layers.as_deref().map_or("all".into(), join));
        kv("trigger_steps", self.trigger_steps.to_string());
        kv("trigger_lr", self.trigger_lr.to_string());
        kv("surgery", self.surgery.to_string());
        kv("attack_batch", self.attack_batch.to_string());
        kv("threshold", self.threshold.to_string());
        kv("insert_epochs", self.insert_epochs.to_string());
        kv("insert_lr", self.insert_lr.to_string());
        kv("insert_batch", self.insert_batch.to_string());
        kv("e_sweep", join(&self.e_sweep));
        kv("lambda_sweep", join(&self.lambda_sweep));
        kv("area_baseline", self.area_baseline.to_string());
        kv("area_top", self.area_top.to_string());
        kv("area_left", self.area_left.to_string());
        kv("area_side", self.area_side.to_string());
        kv("defense", self.defense.to_string());
        kv("defense_factors", self.defense_factors.to_string());
        kv("defense_inner", self.defense_inner.as_deref().map_or(String::new(), join));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn comments_and_overrides() {
        let c = ExperimentConfig::parse("# demo\nseed = 42  # trailing\n\nlayers = 1\ne_sweep = 0, 0.001\n").unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.layers, Some(vec![1]));
        assert_eq!(c.e_sweep, vec![0.0, 0.001]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.seed = 7;
        c.defense_inner = Some(vec![8]);
        c.surgery = SurgeryMode::PrimaryOnly;
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense",
            "seed = x",
            "colour = red",
            "seed = 1\nseed = 2",
            "target_class = 9",
            "budget = 0",
            "dataset = cifar10",
            "insert_epochs = 0",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_) | Error::Parameter(_))), "{text}");
        }
    }
}
