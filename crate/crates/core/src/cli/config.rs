use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::OnlineAugConfig;
use crate::error::{Error, Result};
use crate::nn::{BackboneKind, BackboneSpec, OptimConfig, DEFAULT_EMBEDDING_DIM};
use crate::pipeline::{
    reference, ClassifierHeadSpec, SchedulerConfig, Stage1Loss, StageConfig, DESK_BACKBONE_LR, DESK_CLASSIFIER_LR,
};
use crate::rng::derive_seed;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    /// Fraction of original real training images to augment offline.
    pub offline_fraction: f64,
    pub online: OnlineAugConfig,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            offline_fraction: 0.5,
            online: OnlineAugConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub n_models: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { n_models: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneEntry {
    pub kind: BackboneKind,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Stage-1 epochs for this backbone; `stage1.epochs` when absent.
    #[serde(default)]
    pub epochs: Option<usize>,
}

fn default_embedding_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub scheduler: SchedulerConfig,
    pub loss: Stage1Loss,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            batch_size: reference::BACKBONE_BATCH,
            epochs: 4,
            lr: DESK_BACKBONE_LR,
            weight_decay: reference::BACKBONE_WEIGHT_DECAY,
            temperature: 0.07,
            scheduler: SchedulerConfig::default(),
            loss: Stage1Loss::Supcon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub head: ClassifierHeadSpec,
    pub scheduler: SchedulerConfig,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            batch_size: reference::CLASSIFIER_BATCH,
            epochs: 8,
            lr: DESK_CLASSIFIER_LR,
            head: ClassifierHeadSpec::default(),
            scheduler: SchedulerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub threshold: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    NoOfflineAug,
    NoOnlineAug,
    BceInsteadSupcon,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoOfflineAug,
        AblationVariant::NoOnlineAug,
        AblationVariant::BceInsteadSupcon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoOfflineAug => "no-offline-aug",
            AblationVariant::NoOnlineAug => "no-online-aug",
            AblationVariant::BceInsteadSupcon => "bce-instead-supcon",
        }
    }

    /// The one dimension in which this variant departs from `full`.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoOfflineAug => c.augment.offline_fraction = 0.0,
            AblationVariant::NoOnlineAug => c.augment.online.p_aug = 0.0,
            AblationVariant::BceInsteadSupcon => c.stage1.loss = Stage1Loss::Bce,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Backbone to ablate; the cheapest configured one when absent.
    pub backbone: Option<BackboneKind>,
    pub seeds: Vec<u64>,
    pub configs: Vec<AblationVariant>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            backbone: None,
            seeds: vec![0, 1, 2, 3, 4],
            configs: AblationVariant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub augment: AugmentSection,
    pub sampling: SamplingSection,
    pub backbones: Vec<BackboneEntry>,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub ensemble: EnsembleSection,
    pub ablation: AblationSection,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            augment: AugmentSection::default(),
            sampling: SamplingSection::default(),
            backbones: BackboneKind::ALL
                .iter()
                .map(|&kind| BackboneEntry {
                    kind,
                    embedding_dim: DEFAULT_EMBEDDING_DIM,
                    epochs: None,
                })
                .collect(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            ensemble: EnsembleSection::default(),
            ablation: AblationSection::default(),
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            // serde names the offending key in its message
            Error::config(path.display().to_string(), e.to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if !(0.0..=1.0).contains(&self.augment.offline_fraction) {
            return Err(Error::config("augment.offline_fraction", "must lie in [0, 1]"));
        }
        self.augment
            .online
            .validate()
            .map_err(|e| Error::config("augment.online", e.to_string()))?;
        if self.sampling.n_models != 3 {
            return Err(Error::config("sampling.n_models", "the ensemble needs exactly 3 models"));
        }
        if self.backbones.len() != self.sampling.n_models {
            return Err(Error::config(
                "backbones",
                format!("expected {} entries, got {}", self.sampling.n_models, self.backbones.len()),
            ));
        }
        for i in 0..self.backbones.len() {
            self.backbone_spec(i)
                .validate()
                .map_err(|e| Error::config(format!("backbones[{i}]"), e.to_string()))?;
            self.stage1_config(i)
                .validate()
                .map_err(|e| Error::config(format!("stage1 (backbone {i})"), e.to_string()))?;
        }
        self.stage2_config(0)
            .validate()
            .map_err(|e| Error::config("stage2", e.to_string()))?;
        if !(0.0..1.0).contains(&self.stage2.head.dropout) || self.stage2.head.hidden == 0 {
            return Err(Error::config("stage2.head", "needs hidden > 0 and dropout in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ensemble.threshold) {
            return Err(Error::config("ensemble.threshold", "must lie in [0, 1]"));
        }
        if let Some(kind) = self.ablation.backbone {
            if !self.backbones.iter().any(|b| b.kind == kind) {
                return Err(Error::config("ablation.backbone", format!("`{}` is not configured", kind.name())));
            }
        }
        if self.ablation.seeds.is_empty() || self.ablation.configs.is_empty() {
            return Err(Error::config("ablation", "needs at least one seed and one config"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir", "must not be empty"));
        }
        if self.out_dir.exists() && !self.out_dir.is_dir() {
            return Err(Error::config("out_dir", "exists and is not a directory"));
        }
        Ok(())
    }

    pub fn backbone_spec(&self, index: usize) -> BackboneSpec {
        let b = &self.backbones[index];
        BackboneSpec::preset(b.kind, self.data.size, b.embedding_dim)
    }

    pub fn stage1_config(&self, index: usize) -> StageConfig {
        let s = &self.stage1;
        StageConfig {
            batch_size: s.batch_size,
            optimizer: OptimConfig::adamw(s.lr, s.weight_decay),
            scheduler: s.scheduler.clone(),
            online_aug: self.augment.online.clone(),
            loss: s.loss,
            temperature: s.temperature,
            ..StageConfig::backbone(
                self.backbones[index].epochs.unwrap_or(s.epochs),
                s.lr,
                derive_seed(self.seed, &["stage1", &index.to_string()]),
            )
        }
    }

    pub fn stage2_config(&self, index: usize) -> StageConfig {
        let s = &self.stage2;
        StageConfig {
            batch_size: s.batch_size,
            scheduler: s.scheduler.clone(),
            ..StageConfig::classifier(s.epochs, s.lr, derive_seed(self.seed, &["stage2", &index.to_string()]))
        }
    }

    /// Index of the backbone the ablation runs on.
    pub fn ablation_index(&self) -> Result<usize> {
        match self.ablation.backbone {
            Some(kind) => self
                .backbones
                .iter()
                .position(|b| b.kind == kind)
                .ok_or_else(|| Error::config("ablation.backbone", "not configured")),
            None => {
                let mut best = (usize::MAX, 0);
                for i in 0..self.backbones.len() {
                    let macs = self.backbone_spec(i).macs()?;
                    if macs < best.0 {
                        best = (macs, i);
                    }
                }
                Ok(best.1)
            }
        }
    }

    /// Directory name for model `index`, e.g. `m1-local-cnn`.
    pub fn model_dir_name(&self, index: usize) -> String {
        format!("m{}-{}", index + 1, self.backbones[index].kind.name())
    }
}
