//! The end-to-end recipe, one step per subcommand. Every artifact lands
//! under the configured `out_dir`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::augment::offline_augment;
use crate::ensemble::{ensemble_predictions, read_predictions, write_decisions, write_predictions, EnsembleRow};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{binary_metrics, MetricsReport};
use crate::pipeline::{
    evaluate, load_checkpoint, save_checkpoint, train_stage1, train_stage2, Dataset, ModelCheckpoint, Prediction,
};
use crate::sampling::{build_model_trainset, partition_fakes, PartitionPlan, TrainsetCounts};
use crate::synth::generate_dataset;

/// Artifact locations under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.jsonl")
    }

    pub fn manifest_aug(&self) -> PathBuf {
        self.data_dir().join("manifest_aug.jsonl")
    }

    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }

    pub fn model_dir(&self, cfg: &RunConfig, index: usize) -> PathBuf {
        self.root.join("models").join(cfg.model_dir_name(index))
    }

    pub fn ensemble_dir(&self) -> PathBuf {
        self.root.join("ensemble")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Write `config.resolved.json` with every default expanded.
pub fn write_resolved_config(cfg: &RunConfig) -> Result<()> {
    write_file(&cfg.out_dir.join("config.resolved.json"), cfg.to_json())
}

pub fn synth(cfg: &RunConfig, threads: usize) -> Result<DatasetManifest> {
    let layout = Layout::new(&cfg.out_dir);
    generate_dataset(&cfg.data, cfg.seed, &layout.data_dir(), threads)
}

pub fn augment_offline(cfg: &RunConfig) -> Result<DatasetManifest> {
    let layout = Layout::new(&cfg.out_dir);
    let base = DatasetManifest::load(&layout.manifest())?;
    let out = offline_augment(
        &base,
        cfg.augment.offline_fraction,
        cfg.seed,
        &layout.data_dir().join("images_aug"),
    )?;
    out.save(&layout.manifest_aug())?;
    Ok(out)
}

pub fn partition(cfg: &RunConfig) -> Result<PartitionPlan> {
    let layout = Layout::new(&cfg.out_dir);
    let manifest = DatasetManifest::load(&layout.manifest_aug())?;
    let plan = partition_fakes(&manifest, cfg.sampling.n_models, cfg.seed)?;
    plan.save(&layout.partition())?;
    Ok(plan)
}

/// Data every model trains and validates on.
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub plan: PartitionPlan,
    pub train: Dataset,
    pub val: Dataset,
}

impl Corpus {
    pub fn load(layout: &Layout) -> Result<Self> {
        let manifest = DatasetManifest::load(&layout.manifest_aug())?;
        let plan = PartitionPlan::load(&layout.partition())?;
        let train = Dataset::load_split(&manifest, Split::Train)?;
        let val = Dataset::load_split(&manifest, Split::Val)?;
        Ok(Self {
            manifest,
            plan,
            train,
            val,
        })
    }
}

/// Outcome of training one ensemble member.
#[derive(Clone, Debug)]
pub struct ModelRun {
    pub counts: TrainsetCounts,
    pub stage1: ModelCheckpoint,
    pub stage2: ModelCheckpoint,
    pub predictions: Vec<Prediction>,
    pub metrics: MetricsReport,
}

/// Both training stages for model `index`, writing checkpoints, logs,
/// validation predictions and metrics into `dir`.
pub fn train_one(cfg: &RunConfig, corpus: &Corpus, index: usize, dir: &Path) -> Result<ModelRun> {
    let (records, counts) = build_model_trainset(&corpus.manifest, &corpus.plan, index)?;
    let ids: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let train = corpus.train.subset(&ids);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let s1 = train_stage1(&train, &corpus.val, &cfg.backbone_spec(index), &cfg.stage1_config(index))?;
    save_checkpoint(&s1.checkpoint, &dir.join("backbone.ckpt"))?;
    write_file(&dir.join("stage1_log.jsonl"), s1.log_jsonl())?;

    let s2 = train_stage2(
        &s1.checkpoint,
        &train,
        &corpus.val,
        &cfg.stage2.head,
        &cfg.stage2_config(index),
    )?;
    save_checkpoint(&s2.checkpoint, &dir.join("classifier.ckpt"))?;
    write_file(&dir.join("stage2_log.jsonl"), s2.log_jsonl())?;

    let (predictions, metrics) = score(cfg, &s2.checkpoint, &corpus.val, dir)?;
    Ok(ModelRun {
        counts,
        stage1: s1.checkpoint,
        stage2: s2.checkpoint,
        predictions,
        metrics,
    })
}

fn score(cfg: &RunConfig, ckpt: &ModelCheckpoint, val: &Dataset, dir: &Path) -> Result<(Vec<Prediction>, MetricsReport)> {
    let predictions = evaluate(ckpt, val)?;
    write_predictions(create(&dir.join("predictions.csv"))?, &predictions)?;
    let probs: Vec<f64> = predictions.iter().map(|p| p.prob).collect();
    let metrics = binary_metrics(&probs, &val.labels(), cfg.ensemble.threshold)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok((predictions, metrics))
}

pub fn train(cfg: &RunConfig) -> Result<Vec<ModelRun>> {
    let layout = Layout::new(&cfg.out_dir);
    let corpus = Corpus::load(&layout)?;
    (0..cfg.backbones.len())
        .map(|i| train_one(cfg, &corpus, i, &layout.model_dir(cfg, i)))
        .collect()
}

/// Re-score saved classifiers on the validation split.
pub fn eval(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    let layout = Layout::new(&cfg.out_dir);
    let manifest = DatasetManifest::load(&layout.manifest_aug())?;
    let val = Dataset::load_split(&manifest, Split::Val)?;
    (0..cfg.backbones.len())
        .map(|i| {
            let dir = layout.model_dir(cfg, i);
            let ckpt = load_checkpoint(&dir.join("classifier.ckpt"))?;
            Ok(score(cfg, &ckpt, &val, &dir)?.1)
        })
        .collect()
}

/// Combine the three models' prediction files.
pub fn ensemble(cfg: &RunConfig) -> Result<(Vec<EnsembleRow>, MetricsReport)> {
    let layout = Layout::new(&cfg.out_dir);
    let preds: Vec<Vec<Prediction>> = (0..cfg.backbones.len())
        .map(|i| read_predictions(open(&layout.model_dir(cfg, i).join("predictions.csv"))?))
        .collect::<Result<_>>()?;
    ensemble_from(cfg, [&preds[0], &preds[1], &preds[2]])
}

fn ensemble_from(cfg: &RunConfig, preds: [&[Prediction]; 3]) -> Result<(Vec<EnsembleRow>, MetricsReport)> {
    let layout = Layout::new(&cfg.out_dir);
    let rows = ensemble_predictions(preds)?;
    let dir = layout.ensemble_dir();
    write_decisions(create(&dir.join("decisions.csv"))?, &rows)?;
    let probs: Vec<f64> = rows.iter().map(|r| r.rendered).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let metrics = binary_metrics(&probs, &labels, cfg.ensemble.threshold)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok((rows, metrics))
}

/// Metrics of one complete recipe run.
#[derive(Clone, Debug)]
pub struct RecipeOutcome {
    pub models: Vec<ModelRun>,
    pub ensemble: MetricsReport,
}

impl RecipeOutcome {
    pub fn best_model_accuracy(&self) -> f64 {
        self.models.iter().map(|m| m.metrics.accuracy).fold(0.0, f64::max)
    }
}

/// synth, augment-offline, partition, train and ensemble in one call.
pub fn run_recipe(cfg: &RunConfig, threads: usize) -> Result<RecipeOutcome> {
    cfg.validate()?;
    write_resolved_config(cfg)?;
    synth(cfg, threads)?;
    augment_offline(cfg)?;
    partition(cfg)?;
    let models = train(cfg)?;
    let (_, ensemble) = ensemble_from(
        cfg,
        [&models[0].predictions, &models[1].predictions, &models[2].predictions],
    )?;
    Ok(RecipeOutcome { models, ensemble })
}
