//! Experiment configuration and end-to-end runners shared by the CLI and the
//! acceptance suite.
//!
//! Configs are flat `key = value` text; `#` starts a comment. Unknown keys,
//! repeated keys and unparsable values are errors. Defaults depend on `kind`
//! and mirror the published hyperparameters; desk-scale runs override them.

pub mod artifacts;
pub mod character;
pub mod synthetic;
pub mod verify;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::DataError;
use crate::meta::{BnEval, MetaConfig, MetaError, Order, OuterOptimizer};
use crate::nn::NnError;
use crate::pooling::{Normalization, PoolingError};
use crate::tensor::io::IoError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing adapted weights: {0}")]
    MissingAdapted(PathBuf),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    TensorIo(#[from] IoError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    Synthetic1d,
    Synthetic2d,
    Character,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Synthetic1d => "synthetic-1d",
            ExperimentKind::Synthetic2d => "synthetic-2d",
            ExperimentKind::Character => "character",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic-1d" => Ok(ExperimentKind::Synthetic1d),
            "synthetic-2d" => Ok(ExperimentKind::Synthetic2d),
            "character" => Ok(ExperimentKind::Character),
            _ => Err(format!("unknown experiment kind {s:?} (synthetic-1d, synthetic-2d, character)")),
        }
    }
}

/// Pooling used by the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PoolingKind {
    Meta,
    Max,
    Avg,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 3] = [PoolingKind::Meta, PoolingKind::Max, PoolingKind::Avg];

    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Meta => "meta",
            PoolingKind::Max => "max",
            PoolingKind::Avg => "avg",
        }
    }
}

impl FromStr for PoolingKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "meta" => Ok(PoolingKind::Meta),
            "max" => Ok(PoolingKind::Max),
            "avg" => Ok(PoolingKind::Avg),
            _ => Err(format!("unknown pooling {s:?} (meta, max, avg)")),
        }
    }
}

/// Where character images come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetSource {
    /// Deterministic synthetic glyphs generated in memory.
    Bundled,
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub outer_optimizer: OuterOptimizer,
    pub inner_steps: usize,
    pub temperature: f64,
    pub order: Order,
    pub normalization: Normalization,
    // synthetic
    pub tasks: usize,
    pub heldout_tasks: usize,
    pub sets_per_task: usize,
    pub train_per_task: usize,
    pub input_len: usize,
    pub height: usize,
    pub width: usize,
    // character
    pub dataset: DatasetSource,
    pub glyph_classes: usize,
    pub glyph_instances: usize,
    pub meta_train_classes: usize,
    pub augment: bool,
    pub filters: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub meta_queries: usize,
    pub meta_tasks: usize,
    pub episodes: usize,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub maml_epochs: usize,
    pub maml_batch: usize,
    pub bn_eval: BnEval,
    pub channel_sharing: bool,
    pub noise_ratios: Vec<f64>,
    /// Output directory; not part of the config hash.
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Published defaults for `kind`.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let (height, width) = match kind {
            ExperimentKind::Synthetic1d => (1, 60),
            _ => (28, 28),
        };
        ExperimentConfig {
            kind,
            seed: 0,
            epochs: 10_000,
            batch: 32,
            inner_lr: 0.1,
            outer_lr: 0.001,
            outer_optimizer: OuterOptimizer::Adam,
            inner_steps: 1,
            temperature: 0.2,
            order: Order::Second,
            normalization: match kind {
                ExperimentKind::Character => Normalization::InputSize,
                _ => Normalization::SelectedWeight,
            },
            tasks: 8000,
            heldout_tasks: 100,
            sets_per_task: 20,
            train_per_task: 1,
            input_len: 60,
            height,
            width,
            dataset: DatasetSource::Bundled,
            glyph_classes: 60,
            glyph_instances: 20,
            meta_train_classes: 1200,
            augment: true,
            filters: 64,
            way: 5,
            shot: 1,
            queries: 19,
            meta_queries: 19,
            meta_tasks: 8000,
            episodes: 100,
            adapt_steps: 10,
            adapt_lr: 0.1,
            maml_epochs: 10_000,
            maml_batch: 32,
            bn_eval: BnEval::Batch,
            channel_sharing: true,
            noise_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            out: PathBuf::from("out"),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Config {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(ExperimentError::Config { line: i + 1, message: format!("duplicate key {key:?}") });
            }
        }
        let (kline, kind) = entries
            .remove("kind")
            .ok_or_else(|| ExperimentError::Invalid("missing required key \"kind\"".into()))?;
        let kind = kind.parse().map_err(|message| ExperimentError::Config { line: kline, message })?;
        let mut cfg = ExperimentConfig::defaults(kind);
        for (key, (line, value)) in entries {
            cfg.set(&key, &value).map_err(|message| ExperimentError::Config { line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {v:?}")),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "inner_lr" => self.inner_lr = num(key, value)?,
            "outer_lr" => self.outer_lr = num(key, value)?,
            "outer_optimizer" => {
                self.outer_optimizer = match value {
                    "adam" => OuterOptimizer::Adam,
                    "sgd" => OuterOptimizer::Sgd,
                    _ => return Err(format!("outer_optimizer: expected adam or sgd, got {value:?}")),
                }
            }
            "inner_steps" => self.inner_steps = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "order" => {
                self.order = match value {
                    "second" => Order::Second,
                    "first" => Order::First,
                    _ => return Err(format!("order: expected second or first, got {value:?}")),
                }
            }
            "normalization" => {
                self.normalization = match value {
                    "input-size" => Normalization::InputSize,
                    "selected-weight" => Normalization::SelectedWeight,
                    _ => return Err(format!("normalization: expected input-size or selected-weight, got {value:?}")),
                }
            }
            "tasks" => self.tasks = num(key, value)?,
            "heldout_tasks" => self.heldout_tasks = num(key, value)?,
            "sets_per_task" => self.sets_per_task = num(key, value)?,
            "train_per_task" => self.train_per_task = num(key, value)?,
            "input_len" => self.input_len = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "dataset_root" => {
                self.dataset = if value == "bundled" { DatasetSource::Bundled } else { DatasetSource::Directory(PathBuf::from(value)) }
            }
            "glyph_classes" => self.glyph_classes = num(key, value)?,
            "glyph_instances" => self.glyph_instances = num(key, value)?,
            "meta_train_classes" => self.meta_train_classes = num(key, value)?,
            "augment" => self.augment = flag(key, value)?,
            "filters" => self.filters = num(key, value)?,
            "way" => self.way = num(key, value)?,
            "shot" => self.shot = num(key, value)?,
            "queries" => self.queries = num(key, value)?,
            "meta_queries" => self.meta_queries = num(key, value)?,
            "meta_tasks" => self.meta_tasks = num(key, value)?,
            "episodes" => self.episodes = num(key, value)?,
            "adapt_steps" => self.adapt_steps = num(key, value)?,
            "adapt_lr" => self.adapt_lr = num(key, value)?,
            "maml_epochs" => self.maml_epochs = num(key, value)?,
            "maml_batch" => self.maml_batch = num(key, value)?,
            "bn_eval" => {
                self.bn_eval = match value {
                    "batch" => BnEval::Batch,
                    "running" => BnEval::Running,
                    _ => return Err(format!("bn_eval: expected batch or running, got {value:?}")),
                }
            }
            "channel_sharing" => self.channel_sharing = flag(key, value)?,
            "noise_ratios" => {
                self.noise_ratios = value
                    .split(',')
                    .map(|v| num::<f64>(key, v.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "out" => self.out = PathBuf::from(value),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Invalid(m));
        self.meta_config().validate()?;
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        match self.kind {
            ExperimentKind::Synthetic1d | ExperimentKind::Synthetic2d => {
                if self.train_per_task == 0 || self.train_per_task >= self.sets_per_task {
                    return bad(format!("train_per_task {} must be in 1..{}", self.train_per_task, self.sets_per_task));
                }
                if self.tasks == 0 || self.heldout_tasks == 0 {
                    return bad("tasks and heldout_tasks must be positive".into());
                }
            }
            ExperimentKind::Character => {
                if self.way < 2 || self.shot == 0 || self.queries == 0 || self.meta_queries == 0 {
                    return bad("way ≥ 2, shot ≥ 1, queries ≥ 1 and meta_queries ≥ 1 are required".into());
                }
                if self.episodes == 0 || self.filters == 0 || self.maml_batch == 0 {
                    return bad("episodes, filters and maml_batch must be positive".into());
                }
                if !(self.adapt_lr > 0.0) {
                    return bad("adapt_lr must be positive".into());
                }
                if self.height % 2 != 0 || self.width % 2 != 0 || self.height == 0 || self.width == 0 {
                    return bad(format!("image extents {}×{} must be even", self.height, self.width));
                }
                if let Some(r) = self.noise_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                    return bad(format!("noise ratio {r} is outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            outer_optimizer: self.outer_optimizer,
            batch: self.batch,
            epochs: self.epochs,
            inner_steps: self.inner_steps,
            temperature: self.temperature,
            target: crate::meta::InnerTarget::OtherLayers,
            order: self.order,
            seed: self.seed,
        }
    }

    /// Canonical `key = value` listing of every setting except `out`.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("kind", self.kind.name().into());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("inner_lr", self.inner_lr.to_string());
        kv("outer_lr", self.outer_lr.to_string());
        kv("outer_optimizer", match self.outer_optimizer { OuterOptimizer::Adam => "adam", OuterOptimizer::Sgd => "sgd" }.into());
        kv("inner_steps", self.inner_steps.to_string());
        kv("temperature", self.temperature.to_string());
        kv("order", match self.order { Order::Second => "second", Order::First => "first" }.into());
        kv(
            "normalization",
            match self.normalization { Normalization::InputSize => "input-size", Normalization::SelectedWeight => "selected-weight" }.into(),
        );
        kv("tasks", self.tasks.to_string());
        kv("heldout_tasks", self.heldout_tasks.to_string());
        kv("sets_per_task", self.sets_per_task.to_string());
        kv("train_per_task", self.train_per_task.to_string());
        kv("input_len", self.input_len.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv(
            "dataset_root",
            match &self.dataset { DatasetSource::Bundled => "bundled".into(), DatasetSource::Directory(p) => p.display().to_string() },
        );
        kv("glyph_classes", self.glyph_classes.to_string());
        kv("glyph_instances", self.glyph_instances.to_string());
        kv("meta_train_classes", self.meta_train_classes.to_string());
        kv("augment", self.augment.to_string());
        kv("filters", self.filters.to_string());
        kv("way", self.way.to_string());
        kv("shot", self.shot.to_string());
        kv("queries", self.queries.to_string());
        kv("meta_queries", self.meta_queries.to_string());
        kv("meta_tasks", self.meta_tasks.to_string());
        kv("episodes", self.episodes.to_string());
        kv("adapt_steps", self.adapt_steps.to_string());
        kv("adapt_lr", self.adapt_lr.to_string());
        kv("maml_epochs", self.maml_epochs.to_string());
        kv("maml_batch", self.maml_batch.to_string());
        kv("bn_eval", match self.bn_eval { BnEval::Batch => "batch", BnEval::Running => "running" }.into());
        kv("channel_sharing", self.channel_sharing.to_string());
        kv("noise_ratios", self.noise_ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","));
        s
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_applies_defaults_and_overrides() {
        let cfg = ExperimentConfig::parse("kind = synthetic-1d\n# desk scale\nepochs = 5 # short\ntasks=20\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.tasks, 20);
        assert_eq!(cfg.batch, 32);
        assert_eq!(cfg.temperature, 0.2);
        assert_eq!(cfg.normalization, Normalization::SelectedWeight);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        let err = ExperimentConfig::parse("kind = synthetic-1d\nepohcs = 5\n").unwrap_err();
        assert!(matches!(err, ExperimentError::Config { line: 2, .. }), "{err}");
        assert!(ExperimentConfig::parse("kind = character\nway = 5\nway = 4\n").is_err());
        assert!(ExperimentConfig::parse("epochs = 5\n").is_err());
        assert!(ExperimentConfig::parse("kind = character\nnoise_ratios = 0.1,1.5\n").is_err());
    }

    #[test]
    fn canonical_round_trips_and_hash_ignores_out() {
        let mut cfg = ExperimentConfig::parse("kind = character\nfilters = 8\ndataset_root = /data/x\n").unwrap();
        let again = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(again.canonical(), cfg.canonical());
        let h = cfg.hash();
        cfg.out = PathBuf::from("elsewhere");
        assert_eq!(cfg.hash(), h);
        cfg.seed = 1;
        assert_ne!(cfg.hash(), h);
        assert_eq!(h.len(), 64);
    }
}
