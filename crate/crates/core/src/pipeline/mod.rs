//! Two-stage training: a contrastive backbone (stage 1), then a classifier
//! head on the frozen backbone (stage 2), plus inference and checkpoints.

mod checkpoint;
mod train;

use serde::{Deserialize, Serialize};

use crate::augment::{OnlineAugConfig, Sample};
use crate::error::{Error, Result};
use crate::image::{stack, ImageTensor};
use crate::manifest::{DatasetManifest, Record, Split};
use crate::nn::{LayerSpec, OptimConfig, Tensor};

pub use checkpoint::{backbone_hash, load_checkpoint, save_checkpoint, EpochLog, ModelCheckpoint, OptimizerRecord};
pub use train::{embed, evaluate, init_backbone, train_stage1, train_stage2, Prediction, TrainOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Backbone,
    Classifier,
}

/// Objective for stage 1. `Bce` trains the backbone end to end through a
/// temporary single-logit head that is discarded afterwards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Loss {
    #[default]
    Supcon,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default = "OnlineAugConfig::disabled")]
    pub online_aug: OnlineAugConfig,
    #[serde(default)]
    pub loss: Stage1Loss,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    0.07
}

/// Reference hyperparameters for the three large pretrained backbones,
/// kept for documentation and for configs that want them verbatim.
pub mod reference {
    pub const BACKBONE_BATCH: usize = 16;
    pub const BACKBONE_LR: f64 = 3e-5;
    pub const BACKBONE_WEIGHT_DECAY: f64 = 1e-2;
    /// MaxViT, CoAtNet, EVA-02.
    pub const BACKBONE_EPOCHS: [usize; 3] = [4, 2, 6];
    pub const CLASSIFIER_BATCH: usize = 16;
    pub const CLASSIFIER_LR: f64 = 5e-5;
    pub const CLASSIFIER_EPOCHS: [usize; 3] = [8, 8, 7];
}

/// Stage-1 learning rate used for the small from-scratch backbones.
pub const DESK_BACKBONE_LR: f64 = 1e-3;
/// Stage-2 learning rate used for the small heads.
pub const DESK_CLASSIFIER_LR: f64 = 1e-3;

impl StageConfig {
    pub fn backbone(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            stage: Stage::Backbone,
            batch_size: reference::BACKBONE_BATCH,
            epochs,
            optimizer: OptimConfig::adamw(lr, reference::BACKBONE_WEIGHT_DECAY),
            scheduler: SchedulerConfig::default(),
            online_aug: OnlineAugConfig::default(),
            loss: Stage1Loss::Supcon,
            temperature: default_temperature(),
            seed,
        }
    }

    pub fn classifier(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            stage: Stage::Classifier,
            batch_size: reference::CLASSIFIER_BATCH,
            epochs,
            optimizer: OptimConfig::adam(lr),
            scheduler: SchedulerConfig::default(),
            online_aug: OnlineAugConfig::disabled(),
            loss: Stage1Loss::Supcon,
            temperature: default_temperature(),
            seed,
        }
    }

    pub fn desk_backbone(seed: u64) -> Self {
        Self::backbone(4, DESK_BACKBONE_LR, seed)
    }

    pub fn desk_classifier(seed: u64) -> Self {
        Self::classifier(8, DESK_CLASSIFIER_LR, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let min_batch = if self.stage == Stage::Backbone { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::config(
                "batch_size",
                format!("must be at least {min_batch} for the {:?} stage", self.stage),
            ));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::config("optimizer", e.to_string()))?;
        self.online_aug.validate()?;
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return Err(Error::config("scheduler.factor", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Dense -> batchnorm -> relu -> dropout -> dense(1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierHeadSpec {
    pub hidden: usize,
    pub dropout: f32,
}

impl Default for ClassifierHeadSpec {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout: 0.3,
        }
    }
}

impl ClassifierHeadSpec {
    pub fn layers(&self, input_dim: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense {
                fan_in: input_dim,
                fan_out: self.hidden,
            },
            LayerSpec::BatchNorm { channels: self.hidden },
            LayerSpec::Relu,
            LayerSpec::Dropout { p: self.dropout },
            LayerSpec::Dense {
                fan_in: self.hidden,
                fan_out: 1,
            },
        ]
    }
}

/// Images held in memory together with their ids and labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, records: &[Record]) -> Result<Self> {
        let samples = records
            .iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    label: r.label,
                    image: ImageTensor::load_png(&manifest.resolve(r))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let records: Vec<Record> = manifest.split(split).cloned().collect();
        Self::load(manifest, &records)
    }

    /// Samples whose ids appear in `ids`, in dataset order.
    pub fn subset(&self, ids: &std::collections::HashSet<&str>) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(s.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let imgs: Vec<&ImageTensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        stack(&imgs)
    }
}
