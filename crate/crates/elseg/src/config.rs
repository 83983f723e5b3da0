//! Experiment configuration: flat `key = value` text files with `include`.
//!
//! ```text
//! include base.cfg          # merged first, later keys override
//! train.epochs = 10
//! loss.t_pos = 0.2
//! ```
//!
//! [`Config`] is the raw key-value map; [`ExperimentConfig`] is the fully
//! typed assembly consumed by the trainer, evaluator, and sweep harness.
//! Every run directory receives the resolved flat form of the configuration
//! actually used.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{NormalizationConstants, StrongAugConfig};
use crate::error::{Error, Result};
use crate::loss::{MeanOver, SemiCEConfig};
use crate::model::{BackboneKind, BackboneSpec};
use crate::trainer::{ConsistencyKind, EvalNetwork, TrainerConfig};

/// Raw key-value configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    map: BTreeMap<String, String>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Config {
    /// Parse a config file, following `include` directives depth-first.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Config {
            map: BTreeMap::new(),
            base_dir: path.parent().unwrap_or(Path::new("")).to_path_buf(),
        };
        cfg.merge_file(path, 0)?;
        Ok(cfg)
    }

    /// Parse from a string (no includes), rooted at `base_dir`.
    pub fn from_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Config {
            map: BTreeMap::new(),
            base_dir: base_dir.to_path_buf(),
        };
        cfg.merge_text(text, base_dir, 0)?;
        Ok(cfg)
    }

    fn merge_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > 8 {
            return Err(Error::Config(format!(
                "include depth exceeded at {}",
                path.display()
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        self.merge_text(&text, &dir, depth)
    }

    fn merge_text(&mut self, text: &str, dir: &Path, depth: usize) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(target) = line.strip_prefix("include ") {
                let target = target.trim();
                let path = if Path::new(target).is_absolute() {
                    PathBuf::from(target)
                } else {
                    dir.join(target)
                };
                self.merge_file(&path, depth + 1)?;
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    idx + 1
                )));
            };
            self.map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    fn parse_pair<T: std::str::FromStr + Copy>(&self, key: &str, default: (T, T)) -> Result<(T, T)> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!(
                        "key `{key}`: expected `lo,hi`, got `{v}`"
                    )));
                }
                let lo = parts[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: bad `{v}`")))?;
                let hi = parts[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: bad `{v}`")))?;
                Ok((lo, hi))
            }
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.map.get(key).map(|v| {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.base_dir.join(p)
            }
        })
    }

    fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }
}

/// Fully typed experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
    /// Fraction of the manifest's labeled pairs to keep labeled; the rest
    /// join the unlabeled pool (masks discarded).
    pub labeled_fraction: f64,
    pub split_seed: u64,
    /// Drop the unlabeled pool entirely (plain supervised training).
    pub discard_unlabeled: bool,
    /// Number of defect classes `C` (background excluded).
    pub num_defect_classes: usize,
    pub model: BackboneSpec,
    pub trainer: TrainerConfig,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let num_defect_classes: usize = cfg.parse("data.num_classes", 3)?;
        let kind = match cfg.get("model.kind").unwrap_or("tiny") {
            "tiny" => BackboneKind::Tiny,
            "full_scale" => BackboneKind::FullScale,
            other => {
                return Err(Error::Config(format!(
                    "model.kind must be tiny|full_scale, got `{other}`"
                )))
            }
        };
        let seed: u64 = cfg.parse("train.seed", 1)?;

        let semice = SemiCEConfig {
            t_pos: cfg.parse("loss.t_pos", 0.2)?,
            t_neg: cfg.parse("loss.t_neg", 0.4)?,
            lambda_consistency: cfg.parse("loss.lambda", 1.5)?,
            mean_over: match cfg.get("loss.mean_over").unwrap_or("selected") {
                "selected" => MeanOver::Selected,
                "all" => MeanOver::All,
                other => {
                    return Err(Error::Config(format!(
                        "loss.mean_over must be selected|all, got `{other}`"
                    )))
                }
            },
        };
        semice.validate()?;

        let consistency = match cfg.get("loss.consistency").unwrap_or("semice") {
            "semice" => ConsistencyKind::SemiCE,
            "mse" => ConsistencyKind::Mse,
            other => {
                return Err(Error::Config(format!(
                    "loss.consistency must be semice|mse, got `{other}`"
                )))
            }
        };

        let aug = StrongAugConfig {
            jitter_max_delta: cfg.parse("aug.jitter", 0.5)?,
            grayscale_prob: cfg.parse("aug.grayscale_prob", 0.2)?,
            blur_kernel_range: cfg.parse_pair("aug.blur_kernel", (1, 5))?,
            blur_sigma_range: cfg.parse_pair("aug.blur_sigma", (0.1, 2.0))?,
            cutmix_alpha: cfg.parse("aug.cutmix_alpha", 4.0)?,
            cutmix_beta: cfg.parse("aug.cutmix_beta", 4.0)?,
            cutmix_enabled: cfg.parse("aug.cutmix", true)?,
            cutmix_labeled: cfg.parse("aug.cutmix_labeled", true)?,
            seed,
        };
        aug.validate()?;

        let norm = NormalizationConstants::default();
        norm.validate()?;

        let trainer = TrainerConfig {
            epochs: cfg.parse("train.epochs", 30)?,
            batch_size: cfg.parse("train.batch_size", 16)?,
            lr: cfg.parse("train.lr", 0.001)?,
            momentum: cfg.parse("train.momentum", 0.9)?,
            weight_decay: cfg.parse("train.weight_decay", 0.0001)?,
            ema_alpha: cfg.parse("train.ema_alpha", 0.99)?,
            base_size: cfg.parse("train.base_size", 299)?,
            crop_size: cfg.parse("train.crop_size", 224)?,
            seed,
            checkpoint_every: cfg.parse("train.checkpoint_every", 1)?,
            semice,
            consistency,
            include_background: cfg.parse("eval.include_background", false)?,
            eval_network: match cfg.get("eval.network").unwrap_or("student") {
                "student" => EvalNetwork::Student,
                "teacher" => EvalNetwork::Teacher,
                other => {
                    return Err(Error::Config(format!(
                        "eval.network must be student|teacher, got `{other}`"
                    )))
                }
            },
            aug,
            norm,
        };
        trainer.validate()?;

        Ok(ExperimentConfig {
            train_manifest: cfg.required_path("data.train_manifest")?,
            eval_manifest: cfg.path("data.eval_manifest"),
            labeled_fraction: cfg.parse("data.labeled_fraction", 1.0)?,
            split_seed: cfg.parse("data.split_seed", seed)?,
            discard_unlabeled: cfg.parse("data.discard_unlabeled", false)?,
            num_defect_classes,
            model: BackboneSpec {
                kind,
                pretrained: cfg.parse("model.pretrained", false)?,
                pretrained_path: cfg.path("model.pretrained_path"),
                num_classes: num_defect_classes + 1,
            },
            trainer,
            out_dir: cfg.required_path("out.dir")?,
        })
    }

    /// Flat `key = value` rendering of the configuration actually in force;
    /// reloading it reproduces this configuration.
    pub fn to_flat(&self) -> String {
        let t = &self.trainer;
        let mut lines = vec![
            format!("data.train_manifest = {}", self.train_manifest.display()),
            format!("data.labeled_fraction = {}", self.labeled_fraction),
            format!("data.split_seed = {}", self.split_seed),
            format!("data.discard_unlabeled = {}", self.discard_unlabeled),
            format!("data.num_classes = {}", self.num_defect_classes),
            format!(
                "model.kind = {}",
                match self.model.kind {
                    BackboneKind::Tiny => "tiny",
                    BackboneKind::FullScale => "full_scale",
                }
            ),
            format!("model.pretrained = {}", self.model.pretrained),
            format!("train.epochs = {}", t.epochs),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.lr = {}", t.lr),
            format!("train.momentum = {}", t.momentum),
            format!("train.weight_decay = {}", t.weight_decay),
            format!("train.ema_alpha = {}", t.ema_alpha),
            format!("train.base_size = {}", t.base_size),
            format!("train.crop_size = {}", t.crop_size),
            format!("train.seed = {}", t.seed),
            format!("train.checkpoint_every = {}", t.checkpoint_every),
            format!("loss.t_pos = {}", t.semice.t_pos),
            format!("loss.t_neg = {}", t.semice.t_neg),
            format!("loss.lambda = {}", t.semice.lambda_consistency),
            format!(
                "loss.mean_over = {}",
                match t.semice.mean_over {
                    MeanOver::Selected => "selected",
                    MeanOver::All => "all",
                }
            ),
            format!(
                "loss.consistency = {}",
                match t.consistency {
                    ConsistencyKind::SemiCE => "semice",
                    ConsistencyKind::Mse => "mse",
                }
            ),
            format!("aug.jitter = {}", t.aug.jitter_max_delta),
            format!("aug.grayscale_prob = {}", t.aug.grayscale_prob),
            format!(
                "aug.blur_kernel = {},{}",
                t.aug.blur_kernel_range.0, t.aug.blur_kernel_range.1
            ),
            format!(
                "aug.blur_sigma = {},{}",
                t.aug.blur_sigma_range.0, t.aug.blur_sigma_range.1
            ),
            format!("aug.cutmix_alpha = {}", t.aug.cutmix_alpha),
            format!("aug.cutmix_beta = {}", t.aug.cutmix_beta),
            format!("aug.cutmix = {}", t.aug.cutmix_enabled),
            format!("aug.cutmix_labeled = {}", t.aug.cutmix_labeled),
            format!("eval.include_background = {}", t.include_background),
            format!(
                "eval.network = {}",
                match t.eval_network {
                    EvalNetwork::Student => "student",
                    EvalNetwork::Teacher => "teacher",
                }
            ),
            format!("out.dir = {}", self.out_dir.display()),
        ];
        if let Some(p) = &self.eval_manifest {
            lines.push(format!("data.eval_manifest = {}", p.display()));
        }
        if let Some(p) = &self.model.pretrained_path {
            lines.push(format!("model.pretrained_path = {}", p.display()));
        }
        lines.sort();
        lines.join("\n") + "\n"
    }
}
