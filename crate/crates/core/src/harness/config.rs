//! Run configuration: a TOML file with `[model]`, `[sampling]`, `[loss]`,
//! `[optimizer]`, `[data]` and `[output]` sections.
//!
//! Missing keys take the desk defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{SampleMode, SamplingPlan, StemConfig, StemKind};
use crate::error::{Error, Result};
use crate::harness::data::{SyntheticSpec, Task};
use crate::loss::{KlVariant, LossConfig, LossKind};
use crate::stt::ModelConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub sampling: SamplingSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StemChoice {
    Conv,
    LinearPatch,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub stem: StemChoice,
    /// Window side for the linear-patch stem; ignored otherwise.
    pub patch: usize,
    pub stem_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub spatial: bool,
    pub temporal: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            stem: StemChoice::LinearPatch,
            patch: 4,
            stem_channels: 32,
            dim: 64,
            heads: 4,
            blocks: 2,
            mlp_hidden: 256,
            spatial: true,
            temporal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub segments: usize,
    pub frames_per_segment: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            segments: 4,
            frames_per_segment: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub lambda: f64,
    pub beta: f64,
    pub kl_variant: KlVariant,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            kind: d.kind,
            lambda: d.lambda,
            beta: d.beta,
            kl_variant: d.kl_variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    /// Epochs between divide-by-10 steps of the learning rate.
    pub decay_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            lr: 0.02,
            decay_period: 40,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 60,
            batch_size: 16,
        }
    }
}

impl OptimizerSection {
    /// 0.01 divided by 10 every 40 epochs, batches of 32, 100 epochs.
    pub fn full_scale() -> Self {
        Self {
            lr: 0.01,
            epochs: 100,
            batch_size: 32,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub task: Task,
    pub classes: usize,
    pub clip_length: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Read the training set from this file instead of generating it.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            task: Task::MotionDirection,
            classes: 2,
            clip_length: 12,
            height: 16,
            width: 16,
            channels: 1,
            noise: 0.1,
            train_size: 400,
            test_size: 400,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: PathBuf,
    /// Per-epoch CSV log.
    pub log: PathBuf,
    /// Human-readable evaluation summary.
    pub report: PathBuf,
    /// Evaluation scalars as key=value lines.
    pub metrics: PathBuf,
    pub confusion: PathBuf,
    pub ablation: PathBuf,
    pub gradcheck: PathBuf,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    /// Evaluate on the test set every this many epochs during training; 0 never.
    pub eval_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        let dir = Path::new("out");
        Self {
            checkpoint: dir.join("model.ckpt"),
            log: dir.join("train_log.csv"),
            report: dir.join("report.txt"),
            metrics: dir.join("metrics.txt"),
            confusion: dir.join("confusion.csv"),
            ablation: dir.join("ablation.csv"),
            gradcheck: dir.join("gradcheck.txt"),
            train_data: dir.join("train.sttd"),
            test_data: dir.join("test.sttd"),
            eval_every: 0,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.loss_config().validate().map_err(|e| Error::config(e.to_string()))?;
        self.synthetic_spec(0).validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", o.lr)));
        }
        if o.epochs == 0 || o.batch_size == 0 || o.decay_period == 0 {
            return Err(Error::config("epochs, batch_size and decay_period must be >= 1"));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "need momentum in [0, 1) and weight_decay >= 0, got {} and {}",
                o.momentum, o.weight_decay
            )));
        }
        Ok(())
    }

    /// Model geometry; frame count, input size and classes come from the
    /// sampling and data sections.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let kind = match m.stem {
            StemChoice::Conv => StemKind::ConvStem,
            StemChoice::LinearPatch => StemKind::LinearPatch { patch: m.patch },
            StemChoice::Precomputed => StemKind::Precomputed,
        };
        let stem_channels = match m.stem {
            StemChoice::Precomputed => self.data.channels,
            _ => m.stem_channels,
        };
        let cfg = ModelConfig {
            stem: StemConfig {
                kind,
                in_height: self.data.height,
                in_width: self.data.width,
                in_channels: self.data.channels,
                channels: stem_channels,
            },
            frames: self.sampling_plan(SampleMode::Train)?.frames(),
            dim: m.dim,
            heads: m.heads,
            blocks: m.blocks,
            mlp_hidden: m.mlp_hidden,
            classes: self.data.classes,
            spatial: m.spatial,
            temporal: m.temporal,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampling_plan(&self, mode: SampleMode) -> Result<SamplingPlan> {
        SamplingPlan::new(self.sampling.segments, self.sampling.frames_per_segment, mode)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss.kind,
            lambda: self.loss.lambda,
            beta: self.loss.beta,
            kl_variant: self.loss.kl_variant,
        }
    }

    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            task: d.task,
            classes: d.classes,
            clip_length: d.clip_length,
            height: d.height,
            width: d.width,
            channels: d.channels,
            noise: d.noise,
            train_size: d.train_size,
            test_size: d.test_size,
            seed,
        }
    }

    /// SHA-256 over every setting that shapes the trajectory. `[output]` and
    /// the epoch budget are left out, so a finished run can be extended.
    pub fn digest(&self) -> [u8; 32] {
        let mut training = Self {
            output: OutputSection::default(),
            ..self.clone()
        };
        training.optimizer.epochs = 0;
        Sha256::digest(training.to_toml().as_bytes()).into()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.optimizer.lr, self.optimizer.decay_period, epoch)
    }
}

/// `lr0 * 10^-floor(epoch / period)`.
pub fn lr_schedule(lr0: f64, period: usize, epoch: usize) -> f64 {
    let steps = epoch / period;
    (0..steps).fold(lr0, |lr, _| lr / 10.0)
}
