//! Training configuration, the assembled model, checkpoints and the training loop.
//!
//! Checkpoint archives hold the full backbone (so they are self-contained),
//! the PEFT tensors, `head.w` / `head.b`, and metadata:
//!
//! ```text
//! meta.config_json    uint8 UTF-8 TrainConfig (with resolved PEFT defaults)
//! meta.train_counts   int64 [K]   training samples per class
//! meta.class_count    int64 scalar
//! ```

mod audit;
mod eval;
mod fit;
mod report;

pub use audit::{audit_config, audit_preset, AuditReport, AuditSpec, Preset};
pub use eval::{evaluate, evaluate_checkpoint, predict, EvalOutput};
pub use fit::{linear_probe, train, TrainOutcome};
pub use report::{analyze, inventory, write_analysis_files, write_report_files, Analysis, EpochRecord, Inventory, InventoryEntry, RunReport};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::classifier::{ClassifierConfig, ClassifierParams};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::optim::LrSchedule;
use crate::peft::{PeftConfig, PeftState};
use crate::session::Session;
use crate::tensor::{AnyTensor, Float, Tensor, Var};
use crate::tte::TteConfig;
use crate::vit::{encode, BackboneMode, BackboneParams};

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn yes() -> bool {
    true
}

/// Everything a training run needs besides data and backbone weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backbone_mode: BackboneMode,
    #[serde(default)]
    pub peft: PeftConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub tte: TteConfig,
    #[serde(default)]
    pub augmentation: AugmentConfig,
    /// Add-one smoothing of class counts for the prior.
    #[serde(default)]
    pub prior_smoothing: bool,
    /// Reuse backbone features across epochs when they cannot change.
    #[serde(default = "yes")]
    pub cache_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        let a = &self.augmentation;
        if !(a.min_scale > 0.0 && a.min_scale <= 1.0) || !(0.0..=1.0).contains(&a.flip_prob) {
            return Err(Error::Config("augmentation needs 0 < min_scale ≤ 1 and 0 ≤ flip_prob ≤ 1".into()));
        }
        self.peft.validate()?;
        self.classifier.validate()
    }
}

/// Backbone, attached PEFT module and head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub backbone: BackboneParams<T>,
    pub peft: PeftState<T>,
    pub head: ClassifierParams<T>,
}

impl<T: Float> Model<T> {
    pub fn feature(&self, s: &mut Session<T>, image: &Tensor<T>) -> Result<Var> {
        encode(s, image, &self.backbone, &self.peft)
    }

    pub fn logits(&self, s: &mut Session<T>, image: &Tensor<T>) -> Result<Var> {
        let f = self.feature(s, image)?;
        self.head.logits(s, f)
    }

    /// Logits and feature of one preprocessed image.
    pub fn infer(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut s = Session::inference();
        let f = self.feature(&mut s, image)?;
        let z = self.head.logits(&mut s, f)?;
        Ok((s.value(z).clone(), s.value(f).clone()))
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { backbone: self.backbone.cast(), peft: self.peft.cast(), head: self.head.cast() }
    }

    /// Serializes the model plus the run config and training counts.
    pub fn to_checkpoint(&self, config: &TrainConfig, train_counts: &[usize]) -> Result<Archive> {
        let mut a = Archive::new();
        self.backbone.write_into(&mut a)?;
        self.peft.write_into(&mut a);
        self.head.write_into(&mut a);
        a.insert_bytes("meta.config_json", serde_json::to_string(config)?.as_bytes());
        a.insert("meta.train_counts", AnyTensor::I64(Tensor::from_vec(train_counts.iter().map(|&c| c as i64).collect())));
        a.insert_scalar_i64("meta.class_count", train_counts.len() as i64);
        Ok(a)
    }
}

/// A model restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub train_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Checkpoint {
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&a.require_string("meta.config_json")?)
            .map_err(|e| Error::Format(format!("meta.config_json: {e}")))?;
        let counts = a
            .require("meta.train_counts")?
            .as_i64()
            .map_err(|_| Error::Format("meta.train_counts must be int64".into()))?
            .data()
            .iter()
            .map(|&c| usize::try_from(c).map_err(|_| Error::Format(format!("negative class count {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let (mut backbone, warnings) = BackboneParams::<f32>::from_archive(a, None)?;
        backbone.set_trainable(config.backbone_mode)?;
        let peft = PeftState::from_archive(&config.peft, &mut backbone, a)?;
        let head = ClassifierParams::from_archive(config.classifier.kind, config.classifier.scale, a)?;
        if head.classes() != counts.len() {
            return Err(Error::Format(format!(
                "head has {} classes but meta.train_counts has {}",
                head.classes(),
                counts.len()
            )));
        }
        Ok(Checkpoint { config, model: Model { backbone, peft, head }, train_counts: counts, warnings })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
