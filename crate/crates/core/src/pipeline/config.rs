//! Run configuration, read from TOML.
//!
//! Every table and field is optional; omitted values take the defaults
//! below. Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate reached at the end of the cosine decay.
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Warmup length as a fraction of all steps, unless `warmup_steps` is set.
    pub warmup_frac: f64,
    pub warmup_steps: Option<usize>,
    pub ema_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            min_lr: 2e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            warmup_steps: None,
            ema_decay: 0.999,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training dataset directory.
    pub train: Option<PathBuf>,
    pub max_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops training after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub conf_thresh: f64,
    pub topk_predicates: usize,
    pub topk_video: usize,
    pub mask_thresh: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            max_len: 512,
            batch_size: 48,
            epochs: 10,
            max_steps: None,
            conf_thresh: 0.4,
            topk_predicates: 6,
            topk_video: 200,
            mask_thresh: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 1,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(train) = &cfg.data.train {
            cfg.data.train = Some(base.join(train));
        }
        cfg.output.dir = base.join(&cfg.output.dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        let bad = |m: String| Err(Error::Config(m));
        if !(o.lr > 0.0 && o.min_lr >= 0.0 && o.min_lr <= o.lr) {
            return bad(format!("optim: need 0 <= min_lr <= lr and lr > 0, got {} / {}", o.min_lr, o.lr));
        }
        if o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return bad("optim: invalid weight_decay, betas or eps".into());
        }
        if !(0.0..=1.0).contains(&o.warmup_frac) {
            return bad("optim.warmup_frac must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&o.ema_decay) {
            return bad("optim.ema_decay must lie in [0, 1]".into());
        }
        if o.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("optim.grad_clip must be positive".into());
        }
        let d = &self.data;
        if d.max_len < self.model.stride() {
            return bad(format!("data.max_len must be at least {}", self.model.stride()));
        }
        if d.batch_size == 0 || d.epochs == 0 || d.max_steps == Some(0) {
            return bad("data.batch_size, data.epochs and data.max_steps must be positive".into());
        }
        if d.topk_predicates == 0 || d.topk_predicates > self.model.num_classes || d.topk_video == 0 {
            return bad("data.topk_predicates must be in 1..=num_classes and topk_video positive".into());
        }
        if !(0.0..1.0).contains(&d.conf_thresh) || !(0.0..1.0).contains(&d.mask_thresh) {
            return bad("data.conf_thresh and data.mask_thresh must lie in [0, 1)".into());
        }
        if self.output.log_every == 0 {
            return bad("output.log_every must be positive".into());
        }
        Ok(())
    }
}
