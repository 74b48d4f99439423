//! Run configuration: a `key = value` file with `[data]`, `[students]`,
//! `[losses]` and `[training]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Ratio;
use crate::error::{Result, TccError};
use crate::prototype::PrototypeScope;
use crate::students::{AttentionConfig, ConvConfig, StudentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: PathBuf,
    pub val_dataset: PathBuf,
    pub ratio: Ratio,
    pub batch_size: usize,
    /// Unlabeled images per labeled image in each iteration.
    pub unlabeled_per_labeled: usize,
    pub cutmix: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/train"),
            val_dataset: PathBuf::from("data/val"),
            ratio: Ratio { num: 1, den: 8 },
            batch_size: 8,
            unlabeled_per_labeled: 1,
            cutmix: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub num_classes: usize,
    pub conv: ConvConfig,
    pub attention: AttentionConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            conv: ConvConfig::default(),
            attention: AttentionConfig::default(),
        }
    }
}

impl CohortConfig {
    pub fn conv_student(&self) -> StudentConfig {
        StudentConfig::conv(self.num_classes, self.conv.clone())
    }

    pub fn attention_student(&self) -> StudentConfig {
        StudentConfig::attention(self.num_classes, self.attention.clone())
    }
}

/// Normalizer for the cross-distillation term on the unlabeled batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnlabeledNormalizer {
    /// Divide by the unlabeled batch size (a plain batch mean).
    UnlabeledBatch,
    /// Divide by the labeled batch size.
    LabeledBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Ramp-up length as a fraction of the total iterations.
    pub ramp_fraction: f64,
    pub prototype_scope: PrototypeScope,
    pub unlabeled_normalizer: UnlabeledNormalizer,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: crate::losses::DEFAULT_LAMBDA,
            ramp_fraction: 0.4,
            prototype_scope: PrototypeScope::Image,
            unlabeled_normalizer: UnlabeledNormalizer::UnlabeledBatch,
        }
    }
}

/// Which terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Dice supervision only.
    Supervised,
    /// Supervision plus cross distillation.
    Ccd,
    /// Supervision, cross distillation and feature-consistency distillation.
    Tcc,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Supervised, Mode::Ccd, Mode::Tcc];

    pub fn uses_unlabeled(self) -> bool {
        self != Mode::Supervised
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Ccd => "ccd",
            Mode::Tcc => "tcc",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = TccError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "ccd" => Ok(Mode::Ccd),
            "tcc" => Ok(Mode::Tcc),
            other => Err(TccError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_interval: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tcc,
            iterations: 3000,
            base_lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_interval: 250,
            eval_batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub students: CohortConfig,
    pub losses: LossConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TccError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TccError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TccError::Config(e.to_string()))
    }

    pub fn ramp_iterations(&self) -> usize {
        (self.losses.ramp_fraction * self.training.iterations as f64).round() as usize
    }

    pub fn unlabeled_batch_size(&self) -> usize {
        self.data.batch_size * self.data.unlabeled_per_labeled
    }

    pub fn validate(&self) -> Result<()> {
        self.students.conv_student().validate()?;
        self.students.attention_student().validate()?;
        let t = &self.training;
        if t.iterations == 0 {
            return Err(TccError::Config("training.iterations must be positive".into()));
        }
        if self.data.batch_size == 0 || self.data.unlabeled_per_labeled == 0 {
            return Err(TccError::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.losses.ramp_fraction) {
            return Err(TccError::Config("losses.ramp_fraction must lie in [0, 1]".into()));
        }
        if t.base_lr.is_nan() || t.base_lr <= 0.0 || t.weight_decay < 0.0 || self.losses.lambda < 0.0 {
            return Err(TccError::Config(
                "base_lr must be positive; weight_decay and lambda non-negative".into(),
            ));
        }
        if t.eval_interval == 0 || t.eval_batch_size == 0 {
            return Err(TccError::Config("eval interval and batch size must be positive".into()));
        }
        Ok(())
    }
}
