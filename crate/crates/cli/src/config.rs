//! Plain-text `key = value` run configuration.
//!
//! Every command reads the same key set, so a dump written next to any
//! output can be fed back with `--config` to repeat the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use crisp_core::data::{CorruptionMode, ShapeConfig};
use crisp_core::metrics::MetricsConfig;
use crisp_core::model::ModelConfig;
use crisp_core::training::TrainConfig;
use crisp_core::uncertainty::Normalization;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Crisp,
    Edge,
    Entropy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Crisp => "crisp",
            Self::Edge => "edge",
            Self::Entropy => "entropy",
        }
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crisp" => Ok(Self::Crisp),
            "edge" => Ok(Self::Edge),
            "entropy" => Ok(Self::Entropy),
            _ => bail!("unknown method {s:?} (expected crisp, edge or entropy)"),
        }
    }
}

/// Where the predictions `y*` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredSource {
    /// Ground truth degraded by the corruption engine.
    Corrupt,
    /// Argmax of the model's own segmentation.
    Model,
    /// `pred_XXXX.pgm` files from `pred_dir`.
    External,
}

impl PredSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Corrupt => "corrupt",
            Self::Model => "model",
            Self::External => "external",
        }
    }
}

impl FromStr for PredSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrupt" => Ok(Self::Corrupt),
            "model" => Ok(Self::Model),
            "external" => Ok(Self::External),
            _ => bail!("unknown prediction source {s:?} (expected corrupt, model or external)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data_dir: PathBuf,

    // dataset generation
    pub count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub noise_sigma: f64,

    // model
    pub d_x: usize,
    pub d_y: usize,
    pub d_h: usize,
    pub hidden: usize,
    pub init_seed: u64,

    // training
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub train_seed: u64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub seg_weight: f64,

    // estimation
    pub checkpoint: Option<PathBuf>,
    pub method: Method,
    pub m: Option<usize>,
    pub m_ratio: Option<f64>,
    pub m_list: Vec<usize>,
    pub normalization: Normalization,
    pub pred_source: PredSource,
    pub pred_dir: Option<PathBuf>,
    pub severities: Vec<f64>,
    pub corrupt_modes: Vec<CorruptionMode>,
    pub corrupt_seed: u64,
    /// Directory for cached latent banks; `None` disables caching.
    pub bank_cache: Option<PathBuf>,

    // evaluation
    pub maps_dir: PathBuf,
    pub ece_bins: usize,
    pub mi_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let mc = ModelConfig::new(32, 32, 3);
        let metrics = MetricsConfig::default();
        Self {
            out: PathBuf::from("out"),
            data_dir: PathBuf::from("data"),
            count: 200,
            test_count: 100,
            height: 32,
            width: 32,
            classes: 3,
            seed: 0,
            noise_sigma: ShapeConfig::default().noise_sigma,
            d_x: mc.d_x,
            d_y: mc.d_y,
            d_h: mc.d_h,
            hidden: mc.hidden,
            init_seed: mc.init_seed,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            max_epochs: t.max_epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            train_seed: t.seed,
            dice_weight: t.dice_weight,
            ce_weight: t.ce_weight,
            seg_weight: t.seg_weight,
            checkpoint: None,
            method: Method::Crisp,
            m: None,
            m_ratio: None,
            m_list: vec![5, 10, 25],
            normalization: Normalization::Count,
            pred_source: PredSource::Corrupt,
            pred_dir: None,
            severities: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            corrupt_modes: CorruptionMode::ALL.to_vec(),
            corrupt_seed: 0,
            bank_cache: Some(PathBuf::from("auto")),
            maps_dir: PathBuf::from("maps"),
            ece_bins: metrics.ece_bins,
            mi_bins: metrics.mi_bins,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value {
        "" | "auto" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), ToString::to_string)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "out" => self.out = value.into(),
            "data_dir" => self.data_dir = value.into(),
            "count" => self.count = parse(key, value)?,
            "test_count" => self.test_count = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "size" => {
                self.height = parse(key, value)?;
                self.width = self.height;
            }
            "classes" => self.classes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "d_x" => self.d_x = parse(key, value)?,
            "d_y" => self.d_y = parse(key, value)?,
            "d_h" => self.d_h = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "init_seed" => self.init_seed = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "train_seed" => self.train_seed = parse(key, value)?,
            "dice_weight" => self.dice_weight = parse(key, value)?,
            "ce_weight" => self.ce_weight = parse(key, value)?,
            "seg_weight" => self.seg_weight = parse(key, value)?,
            "checkpoint" => self.checkpoint = (!matches!(value, "" | "none")).then(|| value.into()),
            "method" => self.method = parse(key, value)?,
            "m" => self.m = optional(key, value)?,
            "m_ratio" => self.m_ratio = optional(key, value)?,
            "m_list" => self.m_list = parse_list(key, value)?,
            "normalization" => {
                self.normalization = match value {
                    "count" => Normalization::Count,
                    "weight_sum" => Normalization::WeightSum,
                    _ => bail!("invalid value {value:?} for normalization (expected count or weight_sum)"),
                }
            }
            "pred_source" => self.pred_source = parse(key, value)?,
            "pred_dir" => self.pred_dir = (!matches!(value, "" | "none")).then(|| value.into()),
            "severities" => self.severities = parse_list(key, value)?,
            "corrupt_modes" => self.corrupt_modes = parse_list(key, value)?,
            "corrupt_seed" => self.corrupt_seed = parse(key, value)?,
            "bank_cache" => self.bank_cache = (!matches!(value, "" | "none")).then(|| value.into()),
            "maps_dir" => self.maps_dir = value.into(),
            "ece_bins" => self.ece_bins = parse(key, value)?,
            "mi_bins" => self.mi_bins = parse(key, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies a `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
            self.set(key.trim(), value).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let norm = match self.normalization {
            Normalization::Count => "count",
            Normalization::WeightSum => "weight_sum",
        };
        vec![
            ("out", self.out.display().to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("count", self.count.to_string()),
            ("test_count", self.test_count.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("classes", self.classes.to_string()),
            ("seed", self.seed.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("d_x", self.d_x.to_string()),
            ("d_y", self.d_y.to_string()),
            ("d_h", self.d_h.to_string()),
            ("hidden", self.hidden.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("train_seed", self.train_seed.to_string()),
            ("dice_weight", self.dice_weight.to_string()),
            ("ce_weight", self.ce_weight.to_string()),
            ("seg_weight", self.seg_weight.to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("method", self.method.name().into()),
            ("m", show_opt(&self.m)),
            ("m_ratio", show_opt(&self.m_ratio)),
            ("m_list", join(&self.m_list)),
            ("normalization", norm.into()),
            ("pred_source", self.pred_source.name().into()),
            ("pred_dir", show_path(&self.pred_dir)),
            ("severities", join(&self.severities)),
            ("corrupt_modes", self.corrupt_modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")),
            ("corrupt_seed", self.corrupt_seed.to_string()),
            ("bank_cache", show_path(&self.bank_cache)),
            ("maps_dir", self.maps_dir.display().to_string()),
            ("ece_bins", self.ece_bins.to_string()),
            ("mi_bins", self.mi_bins.to_string()),
        ]
    }

    pub fn dump(&self, command: &str) -> String {
        let mut out = format!("# crisp {command}\n");
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            num_classes: self.classes,
            d_x: self.d_x,
            d_y: self.d_y,
            d_h: self.d_h,
            hidden: self.hidden,
            init_seed: self.init_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            max_epochs: self.max_epochs,
            patience: self.patience,
            val_fraction: self.val_fraction,
            seed: self.train_seed,
            dice_weight: self.dice_weight,
            ce_weight: self.ce_weight,
            seg_weight: self.seg_weight,
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            ece_bins: self.ece_bins,
            mi_bins: self.mi_bins,
        }
    }

    pub fn shape_config(&self) -> ShapeConfig {
        ShapeConfig {
            noise_sigma: self.noise_sigma,
            ..ShapeConfig::default()
        }
    }
}
