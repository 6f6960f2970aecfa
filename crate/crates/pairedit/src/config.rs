//! Run configuration: a flat `key = value` text format with `[section]`
//! headers, one file per run. Unknown sections or keys are errors, as are
//! physically inconsistent combinations, so typos cannot silently fall
//! back to defaults. Every field has a documented default; an empty file
//! parses to the toy setup.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetConfig, PermutationMode, REGISTRY};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};

/// Which parameter set the optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Every parameter except LoRA factors.
    Full,
    /// Only LoRA factors, adapter projections, the prompt encoder, and
    /// the instruction table; the backbone stays frozen.
    Lora,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "lora" => Ok(TrainMode::Lora),
            other => Err(Error::Config(format!(
                "unknown training mode '{other}' (expected full or lora)"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Full => "full",
            TrainMode::Lora => "lora",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate; `schedule` shapes it over the run.
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Probability of replacing the prompt pair with the learned null
    /// prompt during training; the same draw independently blanks the
    /// instruction token.
    pub p_drop: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub schedule: LrSchedule,
    /// Steps of linear learning-rate ramp before the schedule proper.
    pub warmup: usize,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub pairs_per_task: usize,
    pub cap: usize,
    pub holdout: usize,
    pub mode: PermutationMode,
    pub ops: Vec<String>,
    pub unseen: Vec<String>,
    pub shared_base_images: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub variant: Variant,
    /// Prompt-attention fusion weight.
    pub alpha: f64,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataSection,
    pub paths: Paths,
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            variant: Variant::Adapter,
            alpha: 1.0,
            train: TrainConfig {
                lr: 1e-4,
                steps: 2000,
                batch: 4,
                p_drop: 0.1,
                seed: 1000,
                mode: TrainMode::Full,
                schedule: LrSchedule::Cosine,
                warmup: 0,
                checkpoint_every: 500,
            },
            sample: SampleConfig { steps: 24, guidance: 0.0 },
            data: DataSection {
                pairs_per_task: 16,
                cap: 64,
                holdout: 2,
                mode: PermutationMode::Full,
                ops: REGISTRY.iter().map(|op| op.name.to_string()).collect(),
                unseen: vec!["posterize4".into(), "red_tint".into()],
                shared_base_images: false,
            },
            paths: Paths { data_dir: "data".into(), out_dir: "out".into() },
            threads: 1,
        }
    }
}

/// Key/value store built by the line parser; sections flatten into
/// dotted keys so leftover detection can report full paths.
struct Raw {
    entries: BTreeMap<String, String>,
}

impl Raw {
    fn parse(text: &str) -> Result<Raw> {
        const SECTIONS: [&str; 8] =
            ["model", "adapter", "lora", "train", "sample", "dataset", "paths", "run"];
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: malformed section header '{line}'", lineno + 1))
                })?;
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{name}]",
                        lineno + 1
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let section = section.as_deref().ok_or_else(|| {
                Error::Config(format!("line {}: key before any [section]", lineno + 1))
            })?;
            let full = format!("{section}.{}", key.trim());
            if entries.insert(full.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {full}", lineno + 1)));
            }
        }
        Ok(Raw { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<String> = self.entries.into_keys().collect();
        Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
    }
}

fn parse_with<T>(key: &str, value: Option<String>, default: T, f: impl Fn(&str) -> Option<T>) -> Result<T> {
    match value {
        None => Ok(default),
        Some(s) => f(&s).ok_or_else(|| Error::Config(format!("invalid value for {key}: '{s}'"))),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut raw = Raw::parse(text)?;
        let d = Config::default();

        let usize_key = |raw: &mut Raw, key: &str, default: usize| {
            parse_with(key, raw.take(key), default, |s| s.parse().ok())
        };
        let f64_key = |raw: &mut Raw, key: &str, default: f64| {
            parse_with(key, raw.take(key), default, |s| s.parse().ok())
        };
        let bool_key = |raw: &mut Raw, key: &str, default: bool| {
            parse_with(key, raw.take(key), default, |s| s.parse().ok())
        };
        let list_key = |raw: &mut Raw, key: &str, default: &[String]| {
            parse_with(key, raw.take(key), default.to_vec(), |s| {
                if s.is_empty() {
                    Some(Vec::new())
                } else {
                    Some(s.split(',').map(|p| p.trim().to_string()).collect())
                }
            })
        };

        let model = ModelConfig {
            d_model: usize_key(&mut raw, "model.d_model", d.model.d_model)?,
            blocks: usize_key(&mut raw, "model.blocks", d.model.blocks)?,
            heads: usize_key(&mut raw, "model.heads", d.model.heads)?,
            patch: usize_key(&mut raw, "model.patch", d.model.patch)?,
            resolution: usize_key(&mut raw, "model.resolution", d.model.resolution)?,
            n_adapter: usize_key(&mut raw, "adapter.n_adapter", d.model.n_adapter)?,
            text_vocab: d.model.text_vocab,
            lora_rank: usize_key(&mut raw, "lora.rank", d.model.lora_rank)?,
        };
        let variant = parse_with("model.variant", raw.take("model.variant"), d.variant, |s| {
            Variant::from_str(s).ok()
        })?;
        let alpha = f64_key(&mut raw, "adapter.alpha", d.alpha)?;
        let train = TrainConfig {
            lr: f64_key(&mut raw, "train.lr", d.train.lr)?,
            steps: usize_key(&mut raw, "train.steps", d.train.steps)?,
            batch: usize_key(&mut raw, "train.batch", d.train.batch)?,
            p_drop: f64_key(&mut raw, "train.p_drop", d.train.p_drop)?,
            seed: parse_with("train.seed", raw.take("train.seed"), d.train.seed, |s| s.parse().ok())?,
            mode: parse_with("train.mode", raw.take("train.mode"), d.train.mode, |s| {
                TrainMode::from_str(s).ok()
            })?,
            schedule: parse_with("train.schedule", raw.take("train.schedule"), d.train.schedule, |s| {
                match s {
                    "constant" => Some(LrSchedule::Constant),
                    "cosine" => Some(LrSchedule::Cosine),
                    _ => None,
                }
            })?,
            warmup: usize_key(&mut raw, "train.warmup", d.train.warmup)?,
            checkpoint_every: usize_key(&mut raw, "train.checkpoint_every", d.train.checkpoint_every)?,
        };
        let sample = SampleConfig {
            steps: usize_key(&mut raw, "sample.steps", d.sample.steps)?,
            guidance: f64_key(&mut raw, "sample.guidance", d.sample.guidance)?,
        };
        let data = DataSection {
            pairs_per_task: usize_key(&mut raw, "dataset.pairs_per_task", d.data.pairs_per_task)?,
            cap: usize_key(&mut raw, "dataset.cap", d.data.cap)?,
            holdout: usize_key(&mut raw, "dataset.holdout", d.data.holdout)?,
            mode: parse_with("dataset.mode", raw.take("dataset.mode"), d.data.mode, |s| match s {
                "FULL" => Some(PermutationMode::Full),
                "CYCLIC" => Some(PermutationMode::Cyclic),
                _ => None,
            })?,
            ops: list_key(&mut raw, "dataset.ops", &d.data.ops)?,
            unseen: list_key(&mut raw, "dataset.unseen", &d.data.unseen)?,
            shared_base_images: bool_key(&mut raw, "dataset.shared_base_images", d.data.shared_base_images)?,
        };
        let paths = Paths {
            data_dir: raw.take("paths.data_dir").map(PathBuf::from).unwrap_or(d.paths.data_dir),
            out_dir: raw.take("paths.out_dir").map(PathBuf::from).unwrap_or(d.paths.out_dir),
        };
        let threads = usize_key(&mut raw, "run.threads", d.threads)?;
        raw.finish()?;

        let cfg = Config { model, variant, alpha, train, sample, data, paths, threads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite, got {}", self.alpha)));
        }
        if self.train.lr <= 0.0 || !self.train.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.train.lr)));
        }
        if self.train.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train.p_drop) {
            return Err(Error::Config(format!(
                "p_drop must be in [0, 1], got {}",
                self.train.p_drop
            )));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be >= 1".into()));
        }
        if self.train.mode == TrainMode::Lora && self.model.lora_rank == 0 {
            return Err(Error::Config(
                "train.mode = lora requires lora.rank >= 1".into(),
            ));
        }
        if self.sample.steps == 0 {
            return Err(Error::Config("sample.steps must be >= 1".into()));
        }
        if !self.sample.guidance.is_finite() {
            return Err(Error::Config(format!(
                "guidance must be finite, got {}",
                self.sample.guidance
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("run.threads must be >= 1".into()));
        }
        // surface dataset errors at load time rather than at generation
        self.dataset_config().validate()?;
        Ok(())
    }

    /// Dataset generation settings implied by this run configuration; the
    /// image resolution and seed are shared with the model and trainer.
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            root: self.paths.data_dir.clone(),
            resolution: self.model.resolution,
            ops: self.data.ops.clone(),
            unseen: self.data.unseen.clone(),
            pairs_per_task: self.data.pairs_per_task,
            cap: self.data.cap,
            mode: self.data.mode,
            holdout: self.data.holdout,
            seed: self.train.seed,
            shared_base_images: self.data.shared_base_images,
            parallel: cfg!(feature = "parallel") && self.threads > 1,
        }
    }
}
